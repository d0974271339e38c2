"""Overall accuracy, the train/test path check, ablation runs and attention-map export."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from pcnet import ops, seeding
from pcnet.config import TrainConfig
from pcnet.data import Dataset
from pcnet.model import PCNet, single_branch_forward
from pcnet.tensor import Tensor, UsageError, no_grad

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    overall_accuracy: float
    confusion: np.ndarray
    per_class_accuracy: list[float]

    def summary(self) -> str:
        return f"OA={self.overall_accuracy:.6f} n={int(self.confusion.sum())} classes={len(self.confusion)}"


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict_scores(model: PCNet, images: np.ndarray, eval_eca: bool = False, batch_size: int = 100) -> np.ndarray:
    """Class scores through the single-image path, optionally with ECA (ablation only)."""
    dtype = model.classifier.W.dtype
    out = []
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            x = Tensor._wrap(images[sl].astype(dtype, copy=False))
            q = single_branch_forward(model.backbone, model.classifier, x, model.eca if eval_eca else None)
            out.append(q.data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=dtype)


def baseline_scores(model: PCNet, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Reference plain-CNN evaluator: backbone, GAP, FC, softmax and nothing else."""
    dtype = model.classifier.W.dtype
    out = []
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            f = model.backbone(Tensor._wrap(images[sl].astype(dtype, copy=False)))
            logits = ops.affine(ops.global_average_pool(f), model.classifier.W, model.classifier.b)
            out.append(ops.softmax(logits).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=dtype)


def report_from_predictions(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalReport:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(pred)), 1)
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / rows[c]) if rows[c] else float("nan") for c in range(num_classes)]
    return EvalReport(float(np.trace(confusion) / confusion.sum()), confusion, per_class)


def evaluate(model: PCNet, test: Dataset, eval_eca: bool = False, batch_size: int = 100) -> EvalReport:
    """Score every test image on its own; argmax ties go to the lowest class index."""
    if test is None or len(test) == 0:
        raise UsageError("evaluate needs a non-empty test set")
    q = predict_scores(model, test.images, eval_eca, batch_size)
    return report_from_predictions(np.argmax(q, axis=1), test.labels, model.num_classes)


def write_eval_report(report: EvalReport, path, class_names=None) -> None:
    names = class_names or [str(c) for c in range(len(report.confusion))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(names))
        for name, row in zip(names, report.confusion):
            w.writerow([name] + [int(v) for v in row])


@dataclass
class EquivalenceResult:
    ok: bool
    message: str

    def __bool__(self) -> bool:
        return self.ok


def probe_images(model: PCNet, count: int = 8, seed: int = 0) -> np.ndarray:
    rng = seeding.stream(seed, "probe")
    s = model.backbone.input_size
    return rng.normal(size=(count, model.backbone.in_channels, s, s)).astype(model.classifier.W.dtype)


def inference_equivalence_check(model: PCNet, probes: np.ndarray | None = None, eval_eca: bool = False,
                                batch_size: int = 100) -> EquivalenceResult:
    """Does the deployed scoring path equal the plain-CNN evaluator bit for bit?"""
    probes = probe_images(model) if probes is None else probes
    got = predict_scores(model, probes, eval_eca, batch_size)
    ref = baseline_scores(model, probes, batch_size)
    if got.shape == ref.shape and np.array_equal(got, ref):
        return EquivalenceResult(True, f"identical scores on {len(probes)} probe images")
    diff = np.abs(got - ref)
    worst = np.unravel_index(np.argmax(diff), diff.shape)
    return EquivalenceResult(
        False, f"scores diverge on {int(np.count_nonzero(diff.max(axis=1)))}/{len(probes)} probes; "
               f"max |delta|={float(diff.max()):.3e} at probe {worst[0]} class {worst[1]}"
               + (" (eval-time ECA enabled)" if eval_eca else ""))


# ------------------------------------------------------------------ ablation

@dataclass(frozen=True)
class AblationRow:
    row_id: str
    architecture: str = "multi"
    representation: str = "self+mutual"
    objective: str = "Lc+Lr"
    metric: str = "euclidean"
    strategy: str = "SS"
    lam: float = 1.0
    self_attention: bool = True

    def apply(self, base: TrainConfig) -> TrainConfig:
        return base.replace(architecture=self.architecture, representation=self.representation,
                            objective=self.objective, metric=self.metric, strategy=self.strategy,
                            lam=self.lam, self_attention=self.self_attention).validate()


ARCHITECTURE_ROWS = (
    AblationRow("arch:baseline", "single", "self", "Lc"),
    AblationRow("arch:multi-self", "multi", "self", "Lc"),
    AblationRow("arch:multi-mutual", "multi", "mutual", "Lc"),
    AblationRow("arch:multi-both", "multi", "self+mutual", "Lc"),
    AblationRow("arch:pcnet", "multi", "self+mutual", "Lc+Lr"),
)
PLAIN_REFERENCE = AblationRow("ref:plain", "single", "self", "Lc", self_attention=False)
DEFAULT_LAMBDAS = (0.5, 0.8, 1.0, 1.2, 1.5)


@dataclass
class AblationGrid:
    rows: list[AblationRow] = field(default_factory=list)

    @classmethod
    def default(cls, lambdas=DEFAULT_LAMBDAS, include_plain: bool = False) -> "AblationGrid":
        rows = list(ARCHITECTURE_ROWS)
        rows += [AblationRow(f"metric:{m}", metric=m) for m in ("random", "cosine", "euclidean")]
        rows += [AblationRow(f"strategy:{s}", strategy=s) for s in ("RandomRandom", "SRandom", "SD", "SS")]
        rows += [AblationRow(f"lambda:{lam:g}", lam=float(lam)) for lam in lambdas]
        if include_plain:
            rows.append(PLAIN_REFERENCE)
        return cls(rows)

    @classmethod
    def select(cls, row_ids) -> "AblationGrid":
        known = {r.row_id: r for r in cls.default(include_plain=True).rows}
        missing = [r for r in row_ids if r not in known]
        if missing:
            raise UsageError(f"unknown ablation rows {missing}; known: {sorted(known)}")
        return cls([known[r] for r in row_ids])


ABLATION_COLUMNS = ("row_id", "architecture", "representation", "objective", "metric", "strategy", "lambda",
                    "OA", "final_Lc", "final_Lr", "status")


def _run_key(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()[:16]


def run_ablation(grid: AblationGrid, train: Dataset, test: Dataset, base: TrainConfig, out_dir=None) -> list[dict]:
    """Train one model per row with shared seeds and data; write ``ablation.csv``.

    Rows whose resolved configuration coincides share a single run. Finished
    runs are cached under ``out_dir/runs`` so an interrupted grid resumes.
    """
    from pcnet.training import fit, init_state

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    done: dict[str, dict] = {}
    results = []
    for row in grid.rows:
        record = {"row_id": row.row_id, "architecture": row.architecture, "representation": row.representation,
                  "objective": row.objective, "metric": row.metric, "strategy": row.strategy, "lambda": row.lam}
        try:
            cfg = row.apply(base)
            key = _run_key(cfg)
            cache = out_dir / "runs" / f"{key}.json" if out_dir is not None else None
            if key in done:
                outcome = done[key]
            elif cache is not None and cache.exists():
                outcome = json.loads(cache.read_text())
            else:
                logger.info("ablation row %s (run %s)", row.row_id, key)
                state = init_state(cfg, train.num_classes, train.class_names)
                history = fit(state, train, test,
                              metrics_path=(out_dir / "runs" / f"{key}.metrics.csv") if out_dir else None)
                final = history[-1]
                outcome = {"OA": final["test_OA"], "final_Lc": final["L_c"], "final_Lr": final["L_r"],
                           "trace_L": [h["L"] for h in history], "trace_OA": [h["test_OA"] for h in history]}
                if cache is not None:
                    cache.write_text(json.dumps(outcome))
            done[key] = outcome
            record.update(OA=outcome["OA"], final_Lc=outcome["final_Lc"], final_Lr=outcome["final_Lr"],
                          status="ok", trace_L=outcome["trace_L"], trace_OA=outcome["trace_OA"])
        except Exception as exc:  # one failed row must not sink the grid
            logger.exception("ablation row %s failed", row.row_id)
            record.update(OA=float("nan"), final_Lc=float("nan"), final_Lr=float("nan"),
                          status=f"error: {type(exc).__name__}: {exc}", trace_L=[], trace_OA=[])
        results.append(record)
    if out_dir is not None:
        write_ablation_csv(results, out_dir / "ablation.csv")
    return results


def ablation_delta(results: list[dict], a: str = "arch:pcnet", b: str = "arch:baseline") -> float | None:
    by_id = {r["row_id"]: r for r in results}
    if a in by_id and b in by_id:
        return float(by_id[a]["OA"]) - float(by_id[b]["OA"])
    return None


def write_ablation_csv(results: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in results:
            w.writerow([r["row_id"], r["architecture"], r["representation"], r["objective"], r["metric"],
                        r["strategy"], repr(float(r["lambda"])), repr(float(r["OA"])),
                        repr(float(r["final_Lc"])), repr(float(r["final_Lr"])), r["status"]])
        delta = ablation_delta(results)
        if delta is not None:
            w.writerow(["delta:pcnet-minus-baseline", "", "", "", "", "", "", repr(delta), "", "",
                        "ok" if math.isfinite(delta) else "n/a"])


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------- attention maps

def response_map(f: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel L2 norm over channels of ``weights[c] * f[c]``, scaled to [0, 1] by its maximum."""
    g = f if weights is None else f * weights[:, None, None]
    m = np.sqrt(np.sum(g.astype(np.float64) ** 2, axis=0))
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def _write_map(m: np.ndarray, stem: Path) -> tuple[Path, Path]:
    png, csv_path = stem.with_suffix(".png"), stem.with_suffix(".csv")
    try:
        Image.fromarray(np.rint(m * 255).astype(np.uint8), "L").save(png)
        np.savetxt(csv_path, m, delimiter=",", fmt="%.17g")
    except OSError as exc:
        raise OSError(f"cannot write attention map {stem}: {exc}") from exc
    return png, csv_path


def export_attention_maps(model: PCNet, img1: np.ndarray, img2: np.ndarray, out_dir) -> dict[str, np.ndarray]:
    """Write ``self1``, ``self2`` and ``mut`` response maps as grayscale PNG plus CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = model.classifier.W.dtype
    with no_grad():
        x1 = Tensor._wrap(np.asarray(img1, dtype=dtype)[None])
        x2 = Tensor._wrap(np.asarray(img2, dtype=dtype)[None])
        f1, f2 = model.backbone(x1), model.backbone(x2)
        a1, a2 = model.eca.weights(f1).data[0], model.eca.weights(f2).data[0]
        f_cat = model.mutual.concat_features(f1, f2).data[0]
    maps = {
        "self1": response_map(f1.data[0], a1),
        "self2": response_map(f2.data[0], a2),
        "mut": response_map(f_cat),
    }
    for name, m in maps.items():
        _write_map(m, out_dir / name)
    return maps

