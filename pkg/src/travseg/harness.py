"""Run orchestration: backbone pretraining, episodic adaptation with the
frozen-backbone contract, paired ablation matrices, metrics, and reports.

Freezing contract: episodic adaptation updates the depth module and the
decoder, nothing else. The RGB encoder and fusion block load from the
pretraining checkpoint with gradients disabled, and their checksum is
asserted unchanged after every episode.

Determinism contract: (dataset seed, run seed, config) fixes every report
byte. Wall-clock timings are written to a separate timings file that is
excluded from that guarantee.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from statistics import mean, median

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .checkpoint import params_checksum
from .depth import DepthModule, depth_feature_map, embed_scan
from .errors import (ConfigError, ContractError, EmptyRegionError, NumericError,
                     ShapeError, ValidationError)
from .fusion import FusionBlock, RgbEncoder
from .layers import export_params, import_params
from .optim import AdamW, WarmUpPolyLRSchedule, lr_at
from .prototypes import (QueryMask, SegHead, branch_features,
                         trainable_param_count)
from .scenes import Episode, EpisodePool, Sample, decode_runs, sample_episode

PRETRAIN_BASE_LR = 2e-3
DECODER_INIT_GAIN = 0.25


def _grid(n: int) -> int:
    """Spatial size after two stride-2 same-padded convolutions."""
    return ((n + 1) // 2 + 1) // 2


@dataclass(frozen=True)
class RunConfig:
    """Everything that identifies a run; all flags explicit in reports."""

    k: int = 1
    episodes: int = 50
    seeds: tuple[int, ...] = (11, 12, 13)
    use_H: bool = True
    use_W: bool = True
    use_n2p: bool = True
    pooling_mode: str = "mask_pool"
    grid: int = 2
    branch_mode: str = "gated"
    epochs: int = 120
    base_lr: float = 6e-5
    power: float = 0.9
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    m_queries: int = 4
    height: int = 60
    width: int = 80
    channels: int = 32
    workers: int = 1
    trainable: str = "depth+decoder"

    def __post_init__(self):
        if self.k not in (1, 5):
            raise ConfigError(f"k must be 1 or 5, got {self.k}")
        if self.pooling_mode not in ("mask_pool", "gap"):
            raise ConfigError(f"bad pooling_mode {self.pooling_mode!r}")
        if self.branch_mode not in ("gated", "simmap"):
            raise ConfigError(f"bad branch_mode {self.branch_mode!r}")
        if self.trainable != "depth+decoder":
            raise ConfigError(
                "the trainable set is fixed to 'depth+decoder' by the freezing contract")
        if self.epochs < 0 or self.episodes < 1 or not self.seeds:
            raise ConfigError("epochs must be >= 0, episodes/seeds nonempty")
        if self.channels < 17:
            raise ConfigError("channels must be >= 17 to hold the scan embedding")
        if self.height < 8 or self.width < 8:
            raise ConfigError("image dims must be at least 8x8")
        if self.grid < 1 or self.m_queries < 1 or self.workers < 1:
            raise ConfigError("grid, m_queries, and workers must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive, weight_decay nonnegative")

    def schedule(self) -> WarmUpPolyLRSchedule:
        if self.epochs == 0:
            raise ConfigError("no schedule for a 0-epoch run")
        return WarmUpPolyLRSchedule(self.base_lr, self.power,
                                    min(self.warmup_epochs, self.epochs), self.epochs)

    def feature_grid(self) -> tuple[int, int]:
        return _grid(self.height), _grid(self.width)

    def as_text(self) -> str:
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seeds":
                v = ",".join(str(s) for s in v)
            items.append(f"{f.name}={v}")
        return "\n".join(items) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.as_text().encode()).hexdigest()[:12]


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise ValidationError(f"config line is not key=value: {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_items(items: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Coerce key=value strings onto a RunConfig; unknown keys are errors."""
    base = base or RunConfig()
    coerced: dict = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in items.items():
        if key not in types:
            raise ValidationError(f"unknown config key {key!r}")
        if key == "seeds":
            coerced[key] = tuple(int(tok) for tok in raw.split(",") if tok)
        elif key in ("use_H", "use_W", "use_n2p"):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValidationError(f"flag {key} must be boolean, got {raw!r}")
            coerced[key] = raw.lower() in ("true", "1")
        elif key in ("pooling_mode", "branch_mode", "trainable"):
            coerced[key] = raw
        elif key in ("base_lr", "power", "weight_decay"):
            coerced[key] = float(raw)
        else:
            coerced[key] = int(raw)
    return replace(base, **coerced)


# --------------------------------------------------------------------------
# Metrics


def compute_iou(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """Per-class IoU (freespace=1, obstacle=0) and their unweighted mean.

    A class absent from both masks scores 1.0; absent from exactly one
    scores 0.0 (the intersection-over-union of mismatched emptiness).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    ious = []
    for cls in (1, 0):
        p = pred == cls
        t = truth == cls
        union = np.logical_or(p, t).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(float(np.logical_and(p, t).sum() / union))
    iou_free, iou_obst = ious
    return iou_free, iou_obst, (iou_free + iou_obst) / 2.0


# --------------------------------------------------------------------------
# Pretraining


def build_backbone(config: RunConfig, rng: np.random.Generator
                   ) -> tuple[RgbEncoder, FusionBlock]:
    enc = RgbEncoder(rng, channels=config.channels)
    fus = FusionBlock(rng, channels=config.channels)
    return enc, fus


def backbone_params(enc: RgbEncoder, fus: FusionBlock):
    return {**enc.named_params("rgb."), **fus.named_params("fuse.")}


def _baseline_depth(sample: Sample, config: RunConfig) -> Tensor:
    """Constant non-learned depth map (both attention stages off)."""
    gh, gw = config.feature_grid()
    module = DepthModule(np.random.default_rng(0), out_h=gh,
                         d_model=config.channels, use_H=False, use_W=False)
    return depth_feature_map(sample.scan, module, gh, gw)


def pretrain_backbone(train_samples: list[Sample], config: RunConfig, epochs: int,
                      seed: int) -> tuple[dict[str, np.ndarray], dict]:
    """Supervised training of encoder + fusion + a throwaway head.

    The head never leaves this function; the returned checkpoint holds only
    the encoder and fusion parameters. Zero epochs returns the seeded
    initialization untouched.
    """
    if not train_samples:
        raise ValidationError("pretraining split is empty")
    rng = np.random.default_rng([seed, 17])
    enc, fus = build_backbone(config, rng)
    head = SegHead(rng, config.channels, config.channels,
                   (config.height, config.width))
    blobs_init = export_params(backbone_params(enc, fus))
    if epochs == 0:
        return blobs_init, {"epochs": 0, "losses": []}

    depth_consts = [_baseline_depth(s, config) for s in train_samples]
    params = {**backbone_params(enc, fus), **head.named_params("head.")}
    opt = AdamW(params, weight_decay=config.weight_decay)
    sched = WarmUpPolyLRSchedule(PRETRAIN_BASE_LR, config.power,
                                 min(5, epochs), epochs)
    order_rng = np.random.default_rng([seed, 23])
    losses = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(train_samples))
        total = 0.0
        lr = lr_at(epoch, sched)
        for idx in order:
            s = train_samples[idx]
            with Tape() as tape:
                feat = fus(enc(s.rgb), depth_consts[idx])
                logits = head(feat)
                loss = ad.cross_entropy_2class(logits, s.truth.mask)
            if not np.isfinite(loss.item()):
                raise NumericError(f"pretraining diverged at epoch {epoch}, seed {seed}")
            tape.backward(loss)
            opt.step(lr)
            opt.zero_grads()
            total += loss.item()
        losses.append(total / len(train_samples))
    return export_params(backbone_params(enc, fus)), {"epochs": epochs, "losses": losses}


# --------------------------------------------------------------------------
# Episodic adaptation


@dataclass
class EpisodeResult:
    run_seed: int
    episode_seed: int
    config_name: str
    fingerprint: str
    support_domain: str = ""
    query_domain: str = ""
    iou_free: float = 0.0
    iou_obst: float = 0.0
    miou: float = 0.0
    leg_recall: float | None = None
    support_loss_first: float = 0.0
    support_loss_last: float = 0.0
    wall_time: float = 0.0
    skipped: bool = False
    skip_reason: str = ""


def _freeze(named: dict[str, Tensor]) -> None:
    for t in named.values():
        t.requires_grad = False


def _fused_feature(rgb_feat: Tensor, sample_idx: int, scans, embs, depth_mod,
                   fus, gh, gw) -> Tensor:
    dmap = depth_feature_map(scans[sample_idx], depth_mod, gh, gw,
                             emb=embs[sample_idx])
    return fus(rgb_feat, dmap)


def adapt_episode(episode: Episode, frozen_blobs: dict[str, np.ndarray],
                  config: RunConfig, config_name: str = "run") -> EpisodeResult:
    """Adapt depth module + decoder on the supports, evaluate on the queries.

    One optimizer iteration per epoch on the mean support self-matching
    loss: every support acts as a pseudo-query against prototypes pooled
    from all supports. The frozen backbone checksum is asserted unchanged.
    """
    t0 = time.perf_counter()
    result = EpisodeResult(run_seed=0, episode_seed=episode.seed,
                           config_name=config_name, fingerprint=config.fingerprint(),
                           support_domain=episode.support_domain,
                           query_domain=episode.query_domain)
    enc, fus = build_backbone(config, np.random.default_rng(0))
    named_frozen = backbone_params(enc, fus)
    import_params(named_frozen, frozen_blobs)
    _freeze(named_frozen)
    checksum_before = params_checksum(export_params(named_frozen))

    gh, gw = config.feature_grid()
    depth_mod = DepthModule(np.random.default_rng([episode.seed, 7]), out_h=gh,
                            d_model=config.channels, use_H=config.use_H,
                            use_W=config.use_W)
    in_ch = 2 * config.channels if config.branch_mode == "gated" else 2
    decoder = SegHead(np.random.default_rng([episode.seed, 8]), in_ch,
                      config.channels, (config.height, config.width),
                      init_gain=DECODER_INIT_GAIN)
    trainables = {**depth_mod.named_params("depth."),
                  **decoder.named_params("decoder.")}

    samples = episode.support + episode.query
    for s in samples:
        if (s.rgb.height, s.rgb.width) != (config.height, config.width):
            raise ConfigError(
                f"scene is {s.rgb.height}x{s.rgb.width} but the run is configured "
                f"for {config.height}x{config.width}")
    rgb_feats = [enc(s.rgb) for s in samples]
    scans = [s.scan for s in samples]
    embs = [embed_scan(s.scan, config.channels) for s in samples]
    k = len(episode.support)
    sup_masks = [s.truth for s in episode.support]

    # With both attention stages off, nothing upstream of the decoder is
    # trainable: fused features and branch inputs are constants, computed
    # once instead of per epoch. Same values, two orders of magnitude less
    # work for the ablation floor.
    static_depth = not (config.use_H or config.use_W)

    def branch_inputs(feats: list[Tensor], query_feat: Tensor) -> Tensor:
        q_pos, q_neg = branch_features(list(zip(feats[:k], sup_masks)), query_feat,
                                       config.use_n2p, config.pooling_mode,
                                       config.grid, config.branch_mode)
        return ad.concat_channels(q_pos, q_neg)

    def fused_all(count: int) -> list[Tensor]:
        return [_fused_feature(rgb_feats[i], i, scans, embs, depth_mod,
                               fus, gh, gw) for i in range(count)]

    def support_loss(static_inputs: list[Tensor]) -> Tensor:
        if static_depth:
            inputs = static_inputs[:k]
        else:
            feats = fused_all(k)
            inputs = [branch_inputs(feats, feats[i]) for i in range(k)]
        losses = [ad.cross_entropy_2class(decoder(inputs[i]), sup_masks[i].mask)
                  for i in range(k)]
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.scale(total, 1.0 / k)

    try:
        static_inputs: list[Tensor] = []
        if static_depth:
            feats = fused_all(len(samples))
            static_inputs = [branch_inputs(feats, f) for f in feats]

        if config.epochs > 0:
            opt = AdamW(trainables, weight_decay=config.weight_decay)
            sched = config.schedule()
            for epoch in range(config.epochs):
                with Tape() as tape:
                    loss = support_loss(static_inputs)
                val = loss.item()
                if not np.isfinite(val):
                    raise NumericError(
                        f"episode {episode.seed}: non-finite support loss at epoch {epoch}")
                if epoch == 0:
                    result.support_loss_first = val
                result.support_loss_last = val
                tape.backward(loss)
                opt.step(lr_at(epoch, sched))
                opt.zero_grads()
        else:
            result.support_loss_first = result.support_loss_last = \
                support_loss(static_inputs).item()

        # Query inference with the adapted parameters.
        if static_depth:
            query_inputs = static_inputs[k:]
        else:
            feats = fused_all(len(samples))
            query_inputs = [branch_inputs(feats, feats[k + j])
                            for j in range(len(episode.query))]
        ious, leg_recalls = [], []
        for j, q in enumerate(episode.query):
            qm = QueryMask.from_logits(decoder(query_inputs[j]))
            ious.append(compute_iou(qm.mask, q.truth.mask))
            runs = q.meta.get("leg_runs", "")
            if runs:
                leg_map = decode_runs(runs, config.height, config.width)
                if leg_map.any():
                    hit = np.logical_and(qm.mask == 0, leg_map).sum()
                    leg_recalls.append(float(hit / leg_map.sum()))
        result.iou_free = mean(i[0] for i in ious)
        result.iou_obst = mean(i[1] for i in ious)
        result.miou = mean(i[2] for i in ious)
        result.leg_recall = mean(leg_recalls) if leg_recalls else None
    except EmptyRegionError as exc:
        result.skipped = True
        result.skip_reason = str(exc)

    checksum_after = params_checksum(export_params(named_frozen))
    if checksum_after != checksum_before:
        raise ContractError(
            f"frozen backbone changed during episode {episode.seed}")
    result.wall_time = time.perf_counter() - t0
    return result


# --------------------------------------------------------------------------
# Batch running and ablation matrices


def episode_seed_list(config: RunConfig) -> list[tuple[int, int]]:
    """(run_seed, episode_seed) pairs; identical across matrix cells."""
    return [(s, s * 100000 + i) for s in config.seeds for i in range(config.episodes)]


_WORKER_STATE: dict = {}


def _run_one(task) -> EpisodeResult:
    name, run_seed, ep_seed = task
    pool = _WORKER_STATE["pool"]
    frozen = _WORKER_STATE["frozen"]
    config = _WORKER_STATE["configs"][name]
    episode = sample_episode(pool, config.k, ep_seed, config.m_queries)
    res = adapt_episode(episode, frozen, config, config_name=name)
    res.run_seed = run_seed
    return res


def run_matrix(pool: EpisodePool, frozen_blobs: dict[str, np.ndarray],
               configs: dict[str, RunConfig]) -> dict[str, list[EpisodeResult]]:
    """Evaluate every config over the same episode seeds (paired design)."""
    if not configs:
        raise ValidationError("no configurations requested")
    tasks = []
    for name, cfg in configs.items():
        tasks.extend((name, rs, es) for rs, es in episode_seed_list(cfg))
    workers = max(cfg.workers for cfg in configs.values())
    _WORKER_STATE.update(pool=pool, frozen=frozen_blobs, configs=configs)
    try:
        if workers > 1:
            import multiprocessing as mp
            with mp.get_context("fork").Pool(workers) as p:
                results = list(p.imap(_run_one, tasks, chunksize=1))
        else:
            results = [_run_one(t) for t in tasks]
    finally:
        _WORKER_STATE.clear()
    grouped: dict[str, list[EpisodeResult]] = {name: [] for name in configs}
    for res in results:
        grouped[res.config_name].append(res)
    return grouped


DEPTH_MATRIX = {"+H+W": (True, True), "+H-W": (True, False),
                "-H+W": (False, True), "-H-W": (False, False)}
NCL_MATRIX = {"+n2p": True, "-n2p": False}


def ablation_configs(base: RunConfig, matrix: str) -> tuple[dict[str, RunConfig], str]:
    """Cells plus the baseline cell name used for paired deltas."""
    if matrix == "depth":
        cells = {name: replace(base, use_H=h, use_W=w, use_n2p=True)
                 for name, (h, w) in DEPTH_MATRIX.items()}
        return cells, "-H-W"
    if matrix == "ncl":
        cells = {name: replace(base, use_H=True, use_W=True, use_n2p=flag)
                 for name, flag in NCL_MATRIX.items()}
        return cells, "-n2p"
    raise ValidationError(f"unknown ablation matrix {matrix!r}")


def run_ablation(pool: EpisodePool, frozen_blobs: dict[str, np.ndarray],
                 base: RunConfig, matrix: str
                 ) -> tuple[dict[str, RunConfig], dict[str, list[EpisodeResult]], str]:
    configs, baseline = ablation_configs(base, matrix)
    return configs, run_matrix(pool, frozen_blobs, configs), baseline


# --------------------------------------------------------------------------
# Reporting


def paired_deltas(results_a: list[EpisodeResult], results_b: list[EpisodeResult],
                  attr: str = "miou") -> list[float]:
    """Per-episode (a - b) for episodes present and unskipped in both."""
    bmap = {(r.run_seed, r.episode_seed): r for r in results_b if not r.skipped}
    out = []
    for ra in results_a:
        rb = bmap.get((ra.run_seed, ra.episode_seed))
        if rb is not None and not ra.skipped:
            out.append(getattr(ra, attr) - getattr(rb, attr))
    return out


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


CSV_HEADER = ("config,use_H,use_W,use_n2p,pooling_mode,k,run_seed,episode_seed,"
              "support_domain,query_domain,iou_free,iou_obstacle,miou,"
              "miou_delta_vs_baseline,leg_recall,support_loss_first,"
              "support_loss_last,fingerprint")


def report(configs: dict[str, RunConfig], results: dict[str, list[EpisodeResult]],
           out_dir: str | Path, baseline: str | None = None) -> dict[str, Path]:
    """Write results.csv, summary.txt, timings.txt; returns the paths.

    Skipped episodes are excluded from CSV rows and surfaced as counts in
    the summary, so row count = episodes x configs - skips.
    """
    if not results or not any(results.values()):
        raise ValidationError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    base_map = {}
    if baseline is not None and baseline in results:
        base_map = {(r.run_seed, r.episode_seed): r.miou
                    for r in results[baseline] if not r.skipped}

    csv_lines = [CSV_HEADER]
    timing_lines = ["config,run_seed,episode_seed,wall_time_s"]
    for name, rows in results.items():
        cfg = configs[name]
        for r in rows:
            timing_lines.append(f"{name},{r.run_seed},{r.episode_seed},{r.wall_time:.3f}")
            if r.skipped:
                continue
            delta = ""
            key = (r.run_seed, r.episode_seed)
            if base_map and name != baseline and key in base_map:
                delta = f"{r.miou - base_map[key]:.6f}"
            csv_lines.append(",".join([
                name, str(cfg.use_H), str(cfg.use_W), str(cfg.use_n2p),
                cfg.pooling_mode, str(cfg.k), str(r.run_seed), str(r.episode_seed),
                r.support_domain, r.query_domain, _fmt(r.iou_free), _fmt(r.iou_obst),
                _fmt(r.miou), delta, _fmt(r.leg_recall),
                _fmt(r.support_loss_first), _fmt(r.support_loss_last),
                r.fingerprint,
            ]))

    lines = [f"traversability ablation report", f"version={__version__}",
             f"configs={len(results)}"]
    for name, rows in results.items():
        cfg = configs[name]
        kept = [r for r in rows if not r.skipped]
        lines += ["", f"[config {name}]", f"fingerprint={cfg.fingerprint()}",
                  (f"flags: use_H={cfg.use_H} use_W={cfg.use_W} "
                   f"use_n2p={cfg.use_n2p} pooling={cfg.pooling_mode} k={cfg.k}"),
                  f"episodes={len(rows)} skipped={len(rows) - len(kept)}"]
        if kept:
            for label, attr in (("freespace", "iou_free"), ("obstacle", "iou_obst"),
                                ("miou", "miou")):
                vals = [getattr(r, attr) for r in kept]
                lines.append(f"{label}: mean={mean(vals):.6f} median={median(vals):.6f}")
    if baseline is not None and baseline in results:
        for name in results:
            if name == baseline:
                continue
            dm = paired_deltas(results[name], results[baseline], "miou")
            do = paired_deltas(results[name], results[baseline], "iou_obst")
            if not dm:
                continue
            lines += ["", f"[paired {name} vs {baseline}]", f"pairs={len(dm)}",
                      f"mean_delta_miou={mean(dm):.6f}",
                      f"median_delta_miou={median(dm):.6f}",
                      (f"positive_fraction_obstacle="
                       f"{sum(d > 0 for d in do) / len(do):.6f}"),
                      f"median_delta_obstacle={median(do):.6f}"]

    paths = {"csv": out / "results.csv", "summary": out / "summary.txt",
             "timings": out / "timings.txt"}
    paths["csv"].write_text("\n".join(csv_lines) + "\n")
    paths["summary"].write_text("\n".join(lines) + "\n")
    paths["timings"].write_text("\n".join(timing_lines) + "\n")
    return paths


RAW_HEADER = ("run_seed,episode_seed,support_domain,query_domain,iou_free,"
              "iou_obst,miou,leg_recall,support_loss_first,support_loss_last,"
              "wall_time,skipped,skip_reason")


def save_raw_results(configs: dict[str, RunConfig],
                     results: dict[str, list[EpisodeResult]],
                     out_dir: str | Path, baseline: str | None = None) -> Path:
    """Persist per-episode rows so reports can be regenerated later."""
    raw = Path(out_dir) / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    manifest = [f"configs={';'.join(results)}"]
    if baseline is not None:
        manifest.append(f"baseline={baseline}")
    (raw / "manifest.txt").write_text("\n".join(manifest) + "\n")
    for name, rows in results.items():
        lines = [f"# {ln}" for ln in configs[name].as_text().splitlines()]
        lines.append(RAW_HEADER)
        for r in rows:
            lines.append(",".join([
                str(r.run_seed), str(r.episode_seed), r.support_domain,
                r.query_domain, _fmt(r.iou_free), _fmt(r.iou_obst), _fmt(r.miou),
                _fmt(r.leg_recall), _fmt(r.support_loss_first),
                _fmt(r.support_loss_last), f"{r.wall_time:.3f}",
                str(int(r.skipped)), r.skip_reason.replace(",", ";"),
            ]))
        (raw / f"{name}.csv").write_text("\n".join(lines) + "\n")
    return raw


def load_raw_results(run_dir: str | Path
                     ) -> tuple[dict[str, RunConfig], dict[str, list[EpisodeResult]],
                                str | None]:
    raw = Path(run_dir) / "raw"
    manifest_path = raw / "manifest.txt"
    if not manifest_path.is_file():
        raise ValidationError(f"no raw results manifest under {raw}")
    items = parse_config_text(manifest_path.read_text())
    names = [n for n in items.get("configs", "").split(";") if n]
    baseline = items.get("baseline")
    configs: dict[str, RunConfig] = {}
    results: dict[str, list[EpisodeResult]] = {}
    for name in names:
        text = (raw / f"{name}.csv").read_text()
        cfg_lines, rows = [], []
        for ln in text.splitlines():
            if ln.startswith("# "):
                cfg_lines.append(ln[2:])
            elif ln and ln != RAW_HEADER:
                rows.append(ln)
        cfg = config_from_items(parse_config_text("\n".join(cfg_lines)))
        configs[name] = cfg
        out = []
        for row in rows:
            f = row.split(",")
            if len(f) != len(RAW_HEADER.split(",")):
                raise ValidationError(f"malformed raw row in {name}.csv: {row!r}")
            out.append(EpisodeResult(
                run_seed=int(f[0]), episode_seed=int(f[1]), config_name=name,
                fingerprint=cfg.fingerprint(), support_domain=f[2],
                query_domain=f[3],
                iou_free=float(f[4]) if f[4] else 0.0,
                iou_obst=float(f[5]) if f[5] else 0.0,
                miou=float(f[6]) if f[6] else 0.0,
                leg_recall=float(f[7]) if f[7] else None,
                support_loss_first=float(f[8]) if f[8] else 0.0,
                support_loss_last=float(f[9]) if f[9] else 0.0,
                wall_time=float(f[10]), skipped=f[11] == "1", skip_reason=f[12]))
        results[name] = out
    return configs, results, baseline


# --------------------------------------------------------------------------
# Gradient verification


def _episode_loss_builder(probe_name: str):
    """Tiny end-to-end episode loss as a function of one probed parameter.

    Everything is built at fp64 so central differences are meaningful. Toy
    dimensions keep the sweep in the seconds range while still exercising
    scan embedding, both attention stages, fusion, pooling, both prototype
    branches, decoding, and the loss. Returns (loss_fn, initial value).
    """
    h, w, c, beams = 8, 8, 18, 12
    rng = np.random.default_rng(424242)
    from .depth import DepthScan
    from .fusion import RgbImage
    from .prototypes import SupportMask

    scan = DepthScan(rng.uniform(0.4, 4.5, beams), 3, 9, 5.0)
    rgb = RgbImage(rng.uniform(0.0, 1.0, (3, h, w)))
    m = np.ones((h, w), dtype=np.uint8)
    m[h // 2:, : w // 2] = 0
    sup_mask = SupportMask(m)
    qm = np.ones((h, w), dtype=np.uint8)
    qm[: h // 2, w // 2:] = 0

    gh, gw = _grid(h), _grid(w)
    enc = RgbEncoder(np.random.default_rng(7), channels=c, dtype=ad.FP64)
    fus = FusionBlock(np.random.default_rng(8), channels=c, dtype=ad.FP64)
    depth_mod = DepthModule(np.random.default_rng(11), out_h=gh, d_model=c,
                            beams=beams, nominal_fov=(3, 9), dtype=ad.FP64)
    # Zero-init residual paths would hide gradient flow; perturb them.
    jitter = np.random.default_rng(13)
    for name, t in depth_mod.named_params().items():
        if name.startswith("mix.") or name.endswith("proj.weight") or \
                name.endswith("fc2.weight"):
            t.assign(t.data + jitter.normal(0.0, 0.05, t.data.shape))
    decoder = SegHead(np.random.default_rng(19), 2 * c, c, (h, w), dtype=ad.FP64)

    owners = {
        "depth.row_proj": (depth_mod, "row_proj"),
        "depth.mix.weight": (depth_mod.mix, "weight"),
        "depth.stage1.q.bias": (depth_mod.stage1.wq, "bias"),
        "depth.stage2.v.bias": (depth_mod.stage2.wv, "bias"),
        "decoder.conv2.weight": (decoder.conv2, "weight"),
        "decoder.conv2.bias": (decoder.conv2, "bias"),
    }
    if probe_name not in owners:
        raise ValidationError(f"no probe named {probe_name!r}")
    owner, attr = owners[probe_name]
    original = getattr(owner, attr)
    rgb_feat = enc(rgb)

    def loss_fn(p: Tensor) -> Tensor:
        setattr(owner, attr, p)
        try:
            dmap = depth_feature_map(scan, depth_mod, gh, gw)
            feat = fus(rgb_feat, dmap)
            q_pos, q_neg = branch_features([(feat, sup_mask)], feat, True,
                                           "mask_pool", 2, "gated")
            logits = decoder(ad.concat_channels(q_pos, q_neg))
            return ad.cross_entropy_2class(logits, qm)
        finally:
            setattr(owner, attr, original)

    return loss_fn, Tensor(original.data.copy(), requires_grad=False)


EPISODE_PROBES = ("depth.row_proj", "depth.mix.weight", "depth.stage1.q.bias",
                  "depth.stage2.v.bias", "decoder.conv2.weight", "decoder.conv2.bias")


def gradcheck_suite(threshold: float = 1e-3) -> dict[str, float]:
    """Finite-difference check of the composed episode loss, one probed
    parameter at a time. Returns max relative error per probe."""
    errs: dict[str, float] = {}
    for name in EPISODE_PROBES:
        loss_fn, value = _episode_loss_builder(name)
        err = ad.grad_check(loss_fn, value)
        if err > threshold:
            raise NumericError(
                f"episode-loss gradient check failed at {name}: {err:.2e}")
        errs[name] = err
    return errs


def census_report(config: RunConfig, episode_seed: int = 1) -> dict[str, int]:
    """Trainable parameter counts for the configured cell (census check)."""
    gh, _ = config.feature_grid()
    depth_mod = DepthModule(np.random.default_rng([episode_seed, 7]), out_h=gh,
                            d_model=config.channels, use_H=config.use_H,
                            use_W=config.use_W)
    in_ch = 2 * config.channels if config.branch_mode == "gated" else 2
    decoder = SegHead(np.random.default_rng([episode_seed, 8]), in_ch,
                      config.channels, (config.height, config.width))
    depth_n = trainable_param_count(depth_mod.named_params())
    dec_n = trainable_param_count(decoder.named_params())
    return {"depth": depth_n, "decoder": dec_n, "total": depth_n + dec_n}
