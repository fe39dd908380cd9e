"""End-to-end exploration flow: seed training, channel search, dilation search,
precision search and the merged Pareto report, plus the HR post-processing filter.

Every stage is a pure function of the flow config and its inputs. Candidate
ids are derived from grid positions, metrics are rounded to 1e-6 BPM before
they enter any artifact, and the manifest hash covers the whole manifest.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deploy import CandidateModel, pareto_front
from .int_runtime import QModel, from_qat, model_bytes, run_inference, save_model
from .nas_channels import (MNConfig, MaskedOptimizer, attach_masks, expand_uniform, extract_arch,
                           mn_regularizer)
from .nas_dilation import (PITConfig, attach_gates, extract_dilation, gate_refs, pit_regularizer)
from .quantization import (FORMATS, assign_precisions, calibrate, edmips_cost, freeze_observers,
                           meta_layers, plan_from_assignment, prepare_qat, qat_train)
from .signals import (SynthConfig, WindowSet, load_record, split_holdout, split_loso, synth_generate,
                      windows_from_records)
from .tcn import (Conv1d, FullyConnected, Network, SeedConfig, build_seed, count_macs,
                  count_params, layer_macs, load_network, save_network)
from .training import GroupedOptimizer, TrainConfig, evaluate, predict, target_mean, train

log = logging.getLogger(__name__)

MAE_DECIMALS = 6


# ------------------------------------------------------------ post-processing

@dataclass
class PostProcState:
    n: int = 10
    history: deque = field(default_factory=deque)

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.history)) if self.history else None


def postprocess(state: PostProcState, hr_n: float) -> float:
    """Clamp ``hr_n`` to the trailing mean +- 10 %; the filtered value joins the history."""
    if not math.isfinite(hr_n):
        raise ValueError(f"non-finite HR estimate {hr_n!r}")
    out = float(hr_n)
    if len(state.history) >= 2:
        e = state.mean
        p_th = e / 10.0
        out = min(max(out, e - p_th), e + p_th)
    state.history.append(out)
    while len(state.history) > state.n:
        state.history.popleft()
    return out


def postprocess_series(preds, n: int = 10) -> np.ndarray:
    st = PostProcState(n)
    return np.array([postprocess(st, float(p)) for p in preds])


def postprocessed_mae(preds: np.ndarray, ws: WindowSet, n: int = 10) -> float:
    """MAE after filtering each subject's chronological prediction sequence."""
    out = np.empty(len(preds))
    for s in dict.fromkeys(ws.subject_ids.tolist()):
        m = ws.subject_ids == s
        out[m] = postprocess_series(preds[m], n)
    return float(np.mean(np.abs(out - ws.targets)))


# -------------------------------------------------------------------- config

def _log_grid(lo: float, hi: float, n: int) -> list[float]:
    return [float(v) for v in np.logspace(math.log10(lo), math.log10(hi), n)]


@dataclass
class DataConfig:
    source: str = "synthetic"                 # synthetic | files
    files: list = field(default_factory=list)
    synth: dict = field(default_factory=dict)  # SynthConfig fields (seed comes from the flow)
    protocol: str = "holdout"                 # holdout | loso (first partition)
    fractions: tuple = (0.7, 0.15, 0.15)
    n_folds: int = 4

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.protocol not in ("holdout", "loso"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.source == "files" and not self.files:
            raise ValueError("data source 'files' needs at least one file")


@dataclass
class FlowConfig:
    data: DataConfig = field(default_factory=DataConfig)
    seed_net: SeedConfig = field(default_factory=SeedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mn: MNConfig = field(default_factory=MNConfig)
    pit: PITConfig = field(default_factory=PITConfig)
    mn_grid: list = field(default_factory=lambda: _log_grid(1e-6, 1e-3, 8))
    pit_grid: list = field(default_factory=lambda: _log_grid(1e-9, 5e-3, 10))
    pit_seeds: int = 4
    quant_formats: tuple = FORMATS
    uniform_bits: tuple = (8, 4, 2)
    edmips_grid: list = field(default_factory=lambda: _log_grid(1e-5, 1e-3, 5))
    edmips_picks: int = 4
    edmips_lr_scale: float = 10.0
    edmips_normalize: bool = False    # divide the bit cost by its all-int8 value
    warmup_epochs: int = 10
    search_epochs: int = 20
    finetune_epochs: int = 10
    qat_epochs: int = 5
    qat_lr_scale: float = 0.1
    edmips_epochs: int = 5
    stages: tuple = ("channels", "dilation", "quant")
    seed: int = 0
    out_dir: str = "runs/qppg"
    workers: int = 1

    def __post_init__(self):
        for name in ("mn_grid", "pit_grid", "edmips_grid"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        if self.pit_seeds < 2:
            raise ValueError("pit_seeds must be >= 2")
        if any(b not in FORMATS for b in self.quant_formats + tuple(self.uniform_bits)):
            raise ValueError("bit widths must be in {2, 4, 8}")

    # --- (de)serialisation
    _NESTED = {"data": DataConfig, "seed_net": SeedConfig, "train": TrainConfig,
               "mn": MNConfig, "pit": PITConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowConfig":
        kw = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for k, v in doc.items():
            if k not in names:
                raise ValueError(f"unknown config key {k!r}")
            if k in cls._NESTED:
                sub = cls._NESTED[k]
                sub_names = {f.name for f in dataclasses.fields(sub)}
                bad = set(v) - sub_names
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                v = sub(**{kk: tuple(vv) if isinstance(vv, list) and kk not in ("files",) else vv
                           for kk, vv in v.items()})
            elif isinstance(v, list) and k in ("quant_formats", "uniform_bits", "stages"):
                v = tuple(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "FlowConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        """Hash of everything that influences results (not out_dir or workers)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def train_cfg(self, **kw) -> TrainConfig:
        return self.train.replace(seed=self.seed, **kw)


# ---------------------------------------------------------------------- data

@dataclass
class FlowData:
    train: WindowSet
    val: WindowSet
    test: WindowSet


def load_windows(cfg: FlowConfig) -> WindowSet:
    d = cfg.data
    if d.source == "synthetic":
        synth = dict(d.synth)
        synth["seed"] = cfg.seed
        records = synth_generate(SynthConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                for k, v in synth.items()}))
    else:
        records = [load_record(p) for p in d.files]
    return windows_from_records(records)


def load_data(cfg: FlowConfig) -> FlowData:
    ws = load_windows(cfg)
    if cfg.data.protocol == "holdout":
        tr, va, te = split_holdout(ws, cfg.data.fractions)
    else:
        tr, va, te = split_loso(ws, cfg.data.n_folds, cfg.seed)[0]
    return FlowData(ws.subset(tr), ws.subset(va), ws.subset(te))


def make_seed(cfg: FlowConfig, data: FlowData) -> Network:
    net = build_seed(cfg.seed_net, seed=cfg.seed, output_bias=target_mean(data.train))
    net.input_mean, net.input_std = data.train.channel_stats()
    return net


# ---------------------------------------------------------------- candidates

def compute_macs(net: Network) -> list[int]:
    macs = layer_macs(net)
    return [m for m, l in zip(macs, net.layers) if isinstance(l, (Conv1d, FullyConnected))]


def float_candidate(cid: str, net: Network, data: FlowData, stage: str, lam, parent,
                    seed: int) -> CandidateModel:
    pred = predict(net, data.test.inputs)
    mae = float(np.mean(np.abs(pred - data.test.targets)))
    meta = {"params": count_params(net), "val_mae": _r(evaluate(net, data.val).mae_bpm),
            "mae_post": _r(postprocessed_mae(pred, data.test)),
            "dilations": [l.d for l in net.layers if isinstance(l, Conv1d)],
            "channels": [l.c_out for l in net.layers if isinstance(l, Conv1d)]}
    return CandidateModel(cid, _r(mae), 4 * count_params(net), count_macs(net), [],
                          compute_macs(net), stage, lam, parent, seed, meta)


def quant_candidate(cid: str, model: QModel, net: Network, data: FlowData, stage: str, lam,
                    parent, seed: int) -> CandidateModel:
    pred = run_inference(model, data.test.inputs)
    mae = float(np.mean(np.abs(pred - data.test.targets)))
    meta = {"mae_post": _r(postprocessed_mae(pred, data.test))}
    return CandidateModel(cid, _r(mae), model_bytes(model), count_macs(net),
                          [tuple(p) for p in model.layer_bits()], compute_macs(net), stage, lam,
                          parent, seed, meta)


def _r(x: float) -> float:
    return round(float(x), MAE_DECIMALS)


def pick_spread(front: list[CandidateModel], n: int) -> list[CandidateModel]:
    """Both extremes plus evenly spaced intermediates by cost rank."""
    if len(front) <= n:
        return list(front)
    idx = sorted({int(round(v)) for v in np.linspace(0, len(front) - 1, n)})
    return [front[i] for i in idx]


@dataclass
class StageResult:
    candidates: list = field(default_factory=list)
    nets: dict = field(default_factory=dict)        # id -> float Network
    models: dict = field(default_factory=dict)      # id -> QModel
    failures: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)   # id -> relative artifact paths

    def extend(self, other: "StageResult") -> None:
        self.candidates += other.candidates
        self.nets.update(other.nets)
        self.models.update(other.models)
        self.failures += other.failures


def _run_jobs(fn, jobs: list, workers: int) -> StageResult:
    out = StageResult()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_guarded, [fn] * len(jobs), jobs))
    else:
        results = [_guarded(fn, j) for j in jobs]
    for r in results:
        out.extend(r)
    return out


def _guarded(fn, job) -> StageResult:
    try:
        return fn(*job)
    except Exception as exc:  # a failed grid point is recorded, the sweep goes on
        log.warning("job %s failed: %s", job[0], exc)
        return StageResult(failures=[{"id": job[0], "error": f"{type(exc).__name__}: {exc}"}])


# -------------------------------------------------------------------- stages

def run_stage_seed(cfg: FlowConfig, data: FlowData) -> StageResult:
    net = make_seed(cfg, data)
    train(net, data.train, data.val, cfg.train_cfg())
    cand = float_candidate("seed", net, data, "seed", None, None, cfg.seed)
    return StageResult([cand], {"seed": net})


def warm_up(cfg: FlowConfig, data: FlowData, net: Network) -> Network:
    net = net.copy()
    if cfg.warmup_epochs:
        train(net, data.train, data.val, cfg.train_cfg(epochs=cfg.warmup_epochs))
    return net


def _mn_job(cid, cfg: FlowConfig, data: FlowData, warm: Network, lam: float, parent: str):
    net = warm if cfg.mn.omega == 1 else expand_uniform(warm, cfg.mn.omega, cfg.seed)
    net = net.copy()
    masks = attach_masks(net, cfg.mn.cost_mode)
    mn = dataclasses.replace(cfg.mn, lam=lam)
    tcfg = cfg.train_cfg(epochs=cfg.search_epochs)
    train(net, data.train, data.val, tcfg, regularizer=mn_regularizer(masks), reg_weight=lam,
          optimizer=MaskedOptimizer(net, masks, tcfg, mn), select_best=False)
    small = extract_arch(net, masks, mn.tau)
    if cfg.finetune_epochs:
        train(small, data.train, data.val, cfg.train_cfg(epochs=cfg.finetune_epochs))
    cand = float_candidate(cid, small, data, "channels", lam, parent, cfg.seed)
    return StageResult([cand], {cid: small})


def run_stage_channels(cfg: FlowConfig, data: FlowData, seed_net: Network,
                       parent: str = "seed") -> StageResult:
    warm = warm_up(cfg, data, seed_net)
    jobs = [(f"mn-{i:02d}", cfg, data, warm, float(lam), parent) for i, lam in enumerate(cfg.mn_grid)]
    return _run_jobs(_mn_job, jobs, cfg.workers)


def _pit_job(cid, cfg: FlowConfig, data: FlowData, warm: Network, lam: float, parent: str):
    net = warm.copy()
    gated = attach_gates(net, cfg.pit.cost_mode, cfg.pit.binarize_threshold)
    tcfg = cfg.train_cfg(epochs=cfg.search_epochs)
    opt = GroupedOptimizer(net.param_refs(), gate_refs(gated), tcfg, cfg.pit.theta_lr_scale)
    train(net, data.train, data.val, tcfg, regularizer=pit_regularizer(gated), reg_weight=lam,
          optimizer=opt, select_best=False)
    small = extract_dilation(net)
    if cfg.finetune_epochs:
        train(small, data.train, data.val, cfg.train_cfg(epochs=cfg.finetune_epochs))
    cand = float_candidate(cid, small, data, "dilation", lam, parent, cfg.seed)
    return StageResult([cand], {cid: small})


def run_stage_dilation(cfg: FlowConfig, data: FlowData, channel_front: list[CandidateModel],
                       nets: dict) -> StageResult:
    if not channel_front:
        raise ValueError("dilation stage needs a non-empty channel front")
    jobs = []
    for parent in pick_spread(channel_front, cfg.pit_seeds):
        warm = warm_up(cfg, data, nets[parent.id])
        for i, lam in enumerate(cfg.pit_grid):
            jobs.append((f"pit-{parent.id}-{i:02d}", cfg, data, warm, float(lam), parent.id))
    return _run_jobs(_pit_job, jobs, cfg.workers)


def _uniform_job(cid, cfg: FlowConfig, data: FlowData, net: Network, bits: int, parent: str):
    tcfg = cfg.train_cfg(epochs=cfg.qat_epochs, lr=cfg.train.lr * cfg.qat_lr_scale)
    qnet, _ = qat_train(net, data.train, data.val, tcfg, bits=bits)
    model = from_qat(qnet)
    cand = quant_candidate(cid, model, net, data, f"int{bits}", None, parent, cfg.seed)
    return StageResult([cand], models={cid: model})


def search_precision(cfg: FlowConfig, data: FlowData, net: Network, lam: float):
    """Train the mixed-precision meta-network and return the chosen per-layer bits."""
    qm = prepare_qat(net, mixed=True, formats=cfg.quant_formats)
    calibrate(qm, data.train.inputs)
    metas = meta_layers(qm)
    special = {(id(m.wq), "gamma") for m in metas} | {(id(m.aq), "delta") for m in metas if m.aq}
    tcfg = cfg.train_cfg(epochs=cfg.edmips_epochs, lr=cfg.train.lr * cfg.qat_lr_scale)
    opt = GroupedOptimizer(qm.param_refs(), special, tcfg, cfg.edmips_lr_scale)
    norm = edmips_cost_uniform(metas, 8) if cfg.edmips_normalize else 1.0

    def reg(_):
        cost, grads = edmips_cost(metas)
        return cost / norm, {k: g / norm for k, g in grads.items()}

    train(qm, data.train, data.val, tcfg, regularizer=reg, reg_weight=lam, optimizer=opt,
          select_best=False, on_epoch=lambda n, e: freeze_observers(n) if e == 0 else None)
    return assign_precisions(metas)


def edmips_cost_uniform(metas, bits: int) -> float:
    return float(sum(bits * (m.n_weights + (m.n_acts if m.aq else 0)) for m in metas))


def _mixed_job(cid, cfg: FlowConfig, data: FlowData, net: Network, lam: float, parent: str):
    assign = search_precision(cfg, data, net, lam)
    plan = plan_from_assignment(assign)
    tcfg = cfg.train_cfg(epochs=cfg.qat_epochs, lr=cfg.train.lr * cfg.qat_lr_scale)
    qnet, _ = qat_train(net, data.train, data.val, tcfg, plan=plan)
    model = from_qat(qnet)
    cand = quant_candidate(cid, model, net, data, "mixed", lam, parent, cfg.seed)
    cand.meta["assignment"] = [list(a) for a in assign]
    return StageResult([cand], models={cid: model})


def run_stage_quant(cfg: FlowConfig, data: FlowData, arch_front: list[CandidateModel],
                    nets: dict) -> StageResult:
    if not arch_front:
        raise ValueError("quantisation stage needs a non-empty architecture front")
    jobs = [(f"q{b}-{c.id}", cfg, data, nets[c.id], b, c.id)
            for c in arch_front for b in cfg.uniform_bits]
    out = _run_jobs(_uniform_job, jobs, cfg.workers)
    if cfg.edmips_picks > 0 and cfg.edmips_grid:
        jobs = [(f"mix-{c.id}-{i:02d}", cfg, data, nets[c.id], float(lam), c.id)
                for c in pick_spread(arch_front, cfg.edmips_picks)
                for i, lam in enumerate(cfg.edmips_grid)]
        out.extend(_run_jobs(_mixed_job, jobs, cfg.workers))
    return out


# -------------------------------------------------------------------- report

CSV_COLUMNS = ("id", "stage", "lambda", "mae", "bytes", "macs", "bits")


def pareto_csv(front: list[CandidateModel]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in front:
        w.writerow([c.id, c.stage, "" if c.lam is None else repr(float(c.lam)),
                    f"{c.mae_bpm:.{MAE_DECIMALS}f}", c.bytes, c.macs, c.bits_label()])
    return buf.getvalue()


def read_pareto_csv(path) -> list[CandidateModel]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CandidateModel(row["id"], float(row["mae"]), int(row["bytes"]),
                                      int(row["macs"]), parse_bits_label(row["bits"]),
                                      stage=row["stage"],
                                      lam=float(row["lambda"]) if row["lambda"] else None))
    return out


def parse_bits_label(label: str) -> list[tuple[int, int]]:
    """Inverse of ``bits_label`` without per-layer MACs: mixed collapses to its slowest pair."""
    if label in ("", "fp32"):
        return []
    if label.startswith("mixed:"):
        pairs = [tuple(int(v) for v in p.split("/")) for p in label[6:].split(",")]
        return [min(pairs, key=lambda p: min(p))]
    w, a = label[1:].split("a")
    return [(int(w), int(a))]


def scatter_svg(cands: list[CandidateModel], front: list[CandidateModel], axis: str = "bytes",
                width: int = 640, height: int = 420) -> str:
    """Log-cost vs MAE scatter, all candidates in grey and the front in green."""
    pad = 50
    xs = [math.log10(getattr(c, axis)) for c in cands]
    ys = [c.mae_bpm for c in cands]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(c):
        x = pad + (math.log10(getattr(c, axis)) - x0) / (x1 - x0) * (width - 2 * pad)
        y = height - pad - (c.mae_bpm - y0) / (y1 - y0) * (height - 2 * pad)
        return f"{x:.2f}", f"{y:.2f}"

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" font-size="12">'
             f'log10({axis}) [{x0:.2f}, {x1:.2f}]</text>',
             f'<text x="14" y="{height // 2}" font-size="12" transform="rotate(-90 14 {height // 2})" '
             f'text-anchor="middle">MAE [BPM] [{y0:.2f}, {y1:.2f}]</text>']
    for c in cands:
        x, y = px(c)
        lines.append(f'<circle cx="{x}" cy="{y}" r="3" fill="#999999"><title>{c.id}</title></circle>')
    pts = " ".join(",".join(px(c)) for c in front)
    lines.append(f'<polyline points="{pts}" fill="none" stroke="#1a9850" stroke-width="1.5"/>')
    for c in front:
        x, y = px(c)
        lines.append(f'<circle cx="{x}" cy="{y}" r="4" fill="#1a9850"><title>{c.id}</title></circle>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def build_manifest(cfg: FlowConfig, cands: list[CandidateModel], failures: list,
                   artifacts: dict) -> dict:
    front_b = pareto_front(cands, "bytes")
    front_m = pareto_front(cands, "macs")
    doc = {
        "config_hash": cfg.hash(),
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("out_dir", "workers")},
        "candidates": [dict(c.to_dict(), artifacts=artifacts.get(c.id, [])) for c in cands],
        "failures": failures,
        "front_bytes": [c.id for c in front_b],
        "front_macs": [c.id for c in front_m],
    }
    doc["manifest_hash"] = manifest_hash(doc)
    return doc


def manifest_hash(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def check_lineage(doc: dict) -> None:
    ids = {c["id"]: c for c in doc["candidates"]}
    for c in doc["candidates"]:
        seen = set()
        cur = c
        while cur["parent"] is not None:
            if cur["id"] in seen or cur["parent"] not in ids:
                raise ValueError(f"candidate {c['id']} has a broken lineage")
            seen.add(cur["id"])
            cur = ids[cur["parent"]]
        if cur["stage"] != "seed":
            raise ValueError(f"candidate {c['id']} does not descend from the seed")


def merge_and_report(cfg: FlowConfig, cands: list[CandidateModel], out_dir, failures=(),
                     artifacts: dict | None = None) -> tuple[list[CandidateModel], dict]:
    """Global front over bytes (and MACs); writes pareto.csv, pareto_macs.csv,
    pareto_points.svg and manifest.json into ``out_dir``."""
    if not cands:
        raise ValueError("nothing to merge")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cands = sorted(cands, key=lambda c: c.id)
    doc = build_manifest(cfg, cands, list(failures), artifacts or {})
    check_lineage(doc)
    front = pareto_front(cands, "bytes")
    (out / "pareto.csv").write_text(pareto_csv(front))
    (out / "pareto_macs.csv").write_text(pareto_csv(pareto_front(cands, "macs")))
    (out / "pareto_points.svg").write_text(scatter_svg(cands, front))
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return front, doc


# ----------------------------------------------------------- stage storage

def save_stage(out_dir, name: str, res: StageResult) -> dict:
    """Persist a stage's networks/models and its candidate list; returns artifact paths."""
    out = Path(out_dir)
    (out / "nets").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    arts = {}
    for cid, net in res.nets.items():
        rel = f"nets/{cid}.npz"
        save_network(net, out / rel)
        arts[cid] = [rel]
    for cid, model in res.models.items():
        rel = f"models/{cid}.qppg"
        save_model(model, out / rel)
        arts[cid] = [rel]
    doc = {"candidates": [c.to_dict() for c in res.candidates], "failures": res.failures,
           "artifacts": arts}
    (out / f"stage_{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return arts


def candidate_from_dict(d: dict) -> CandidateModel:
    d = {k: v for k, v in d.items() if k != "artifacts"}
    d["layer_bits"] = [tuple(p) for p in d.get("layer_bits", [])]
    return CandidateModel(**d)


def load_stage(out_dir, name: str, with_nets: bool = True) -> StageResult:
    out = Path(out_dir)
    path = out / f"stage_{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the {name} stage first")
    doc = json.loads(path.read_text())
    res = StageResult([candidate_from_dict(c) for c in doc["candidates"]], failures=doc["failures"])
    if with_nets:
        for cid, paths in doc["artifacts"].items():
            if paths[0].endswith(".npz"):
                res.nets[cid] = load_network(out / paths[0])
    res.artifacts = doc["artifacts"]
    return res


STAGE_ORDER = ("seed", "channels", "dilation", "quant")


def run_named_stage(cfg: FlowConfig, name: str, data: FlowData | None = None) -> StageResult:
    """Run one stage reading its inputs from (and writing its outputs to) ``cfg.out_dir``."""
    data = data or load_data(cfg)
    out = cfg.out_dir
    if name == "seed":
        res = run_stage_seed(cfg, data)
    elif name == "channels":
        seed = load_stage(out, "seed")
        res = run_stage_channels(cfg, data, seed.nets["seed"])
    elif name == "dilation":
        seed, ch = load_stage(out, "seed"), load_stage(out, "channels")
        pool = seed.candidates + ch.candidates
        res = run_stage_dilation(cfg, data, pareto_front(pool, "bytes"), {**seed.nets, **ch.nets})
    elif name == "quant":
        pool, nets = [], {}
        for st in ("seed", "channels", "dilation"):
            if (Path(out) / f"stage_{st}.json").exists():
                r = load_stage(out, st)
                pool += r.candidates
                nets.update(r.nets)
        res = run_stage_quant(cfg, data, pareto_front(pool, "bytes"), nets)
    else:
        raise ValueError(f"unknown stage {name!r}")
    save_stage(out, name, res)
    return res


def merge_from_dir(cfg: FlowConfig) -> tuple[list[CandidateModel], dict]:
    cands, failures, arts = [], [], {}
    for st in STAGE_ORDER:
        p = Path(cfg.out_dir) / f"stage_{st}.json"
        if p.exists():
            r = load_stage(cfg.out_dir, st, with_nets=False)
            cands += r.candidates
            failures += r.failures
            arts.update(r.artifacts)
    return merge_and_report(cfg, cands, cfg.out_dir, failures, arts)


def run_flow(cfg: FlowConfig) -> tuple[list[CandidateModel], dict]:
    """Seed training followed by the configured stages and the merged report."""
    data = load_data(cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    run_named_stage(cfg, "seed", data)
    for st in ("channels", "dilation", "quant"):
        if st in cfg.stages:
            run_named_stage(cfg, st, data)
    return merge_from_dir(cfg)
