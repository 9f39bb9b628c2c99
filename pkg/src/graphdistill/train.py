"""Experiment orchestration: distillation training loop, evaluation,
report emission, and the finite-difference gradient harness."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import PHASE_MLP, PHASE_STUDENT, ExperimentConfig, StudentConfig, TeacherConfig
from .errors import ContractError, TrainingDivergenceError
from .features import FeatureMatrix
from .graphs import Graph, load_graph, synth_graph
from .losses import DistillConfig, LossBreakdown, cls_loss, macro_loss, micro_loss, \
    multiscale_loss, total_loss
from .optim import Adam
from .student import MlpParams, StudentParams, init_mlp_params, init_student_params, \
    mlp_baseline_forward, student_forward
from .teachers import TeacherArtifacts, init_teacher_params, teacher_forward, train_teacher
from .tensor import Tensor

METHODS = ("teacher", "mlp", "student-distilled", "student-undistilled")


def evaluate(logits, labels: np.ndarray, mask: np.ndarray) -> float:
    """Masked argmax accuracy; argmax ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    mask = np.asarray(mask, dtype=bool)
    if data.shape[0] != mask.shape[0]:
        raise ContractError(f"{data.shape[0]} logit rows vs mask of length {mask.shape[0]}")
    if not mask.any():
        raise ContractError("evaluate: empty mask")
    pred = data[mask].argmax(axis=1)
    return float((pred == np.asarray(labels)[mask]).mean())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    cls: float
    micro: float
    macro: float
    multi: float
    total: float
    lambda_eff: float
    val_acc: float


def write_history_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "cls", "micro", "macro", "multi", "total",
                         "lambda_eff", "val_acc"])
        for r in records:
            writer.writerow([r.epoch, repr(r.cls), repr(r.micro), repr(r.macro),
                             repr(r.multi), repr(r.total), repr(r.lambda_eff), repr(r.val_acc)])


def _student_input(g: Graph, artifacts: TeacherArtifacts | None,
                   cfg: ExperimentConfig) -> FeatureMatrix:
    if cfg.student.input_mode == "teacher-latent":
        if artifacts is None:
            raise ContractError("teacher-latent input mode requires teacher artifacts")
        return FeatureMatrix(dense=np.array(artifacts.latent, dtype=np.float64))
    return FeatureMatrix.from_array(g.features, row_normalize=cfg.row_normalize)


def distill_train(g: Graph, artifacts: TeacherArtifacts, cfg: ExperimentConfig,
                  seed: int | None = None,
                  distill_cfg: DistillConfig | None = None,
                  ) -> tuple[StudentParams, list[EpochRecord]]:
    """Train the Transformer student against the frozen teacher.

    Full-batch descent on the combined objective, early stopping on validation
    accuracy; returns best-validation parameters and the per-epoch breakdown.
    """
    seed = cfg.seed if seed is None else seed
    dcfg = (distill_cfg or cfg.distill).validate()
    sc = cfg.student
    rng = np.random.default_rng([seed, PHASE_STUDENT])

    x = _student_input(g, artifacts, cfg)
    params = init_student_params(x.shape[1], g.num_classes, sc, rng)
    opt = Adam(params.tensors(), lr=sc.lr, weight_decay=sc.weight_decay)

    k_scales = dcfg.k_scales if dcfg.k_scales is not None else artifacts.depth
    # Pure function of the frozen artifacts: constant across epochs.
    multi = multiscale_loss(artifacts.layer_embeddings, g.edges,
                            k_scales=k_scales, sign=dcfg.multiscale_sign)

    history: list[EpochRecord] = []
    best_val = -1.0
    best_snapshot = [p.data.copy() for p in params.tensors()]
    wait = 0
    for epoch in range(sc.epochs):
        out = student_forward(x, params, sc, rng=rng, training=True)
        cls_term = cls_loss(out.logits, g.labels, g.train_mask)
        micro_term = micro_loss(artifacts.logits, out.logits, g.edges, dcfg.tau)
        macro_term = macro_loss(artifacts.logits, out.logits, g.edges, dcfg.tau)
        loss, breakdown = total_loss(cls_term, micro_term, macro_term, multi, dcfg, epoch)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergenceError(
                epoch, f"student: non-finite loss at epoch {epoch}: {breakdown}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        with T.no_grad():
            eval_out = student_forward(x, params, sc, training=False)
        val_acc = evaluate(eval_out.logits, g.labels, g.val_mask)
        history.append(EpochRecord(
            epoch=epoch, cls=breakdown.cls, micro=breakdown.micro, macro=breakdown.macro,
            multi=breakdown.multi, total=breakdown.total,
            lambda_eff=dcfg.effective_lambda(epoch), val_acc=val_acc))
        if val_acc > best_val:
            best_val = val_acc
            best_snapshot = [p.data.copy() for p in params.tensors()]
            wait = 0
        else:
            wait += 1
            if wait >= sc.patience:
                break

    for p, snap in zip(params.tensors(), best_snapshot):
        p.data = snap
    return params, history


def train_mlp(g: Graph, cfg: ExperimentConfig, seed: int | None = None
              ) -> tuple[MlpParams, float]:
    """The graph-blind baseline trained with the same early-stopping policy."""
    seed = cfg.seed if seed is None else seed
    mc = cfg.mlp
    rng = np.random.default_rng([seed, PHASE_MLP])
    x = FeatureMatrix.from_array(g.features, row_normalize=cfg.row_normalize)
    params = init_mlp_params(x.shape[1], g.num_classes, mc.hidden, rng)
    opt = Adam(params.tensors(), lr=mc.lr, weight_decay=mc.weight_decay)

    best_val = -1.0
    best_snapshot = [p.data.copy() for p in params.tensors()]
    wait = 0
    for epoch in range(mc.epochs):
        logits = mlp_baseline_forward(x, params, dropout=mc.dropout, rng=rng, training=True)
        loss = cls_loss(logits, g.labels, g.train_mask)
        if not np.isfinite(loss.item()):
            raise TrainingDivergenceError(epoch, f"mlp: non-finite loss at epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with T.no_grad():
            val_logits = mlp_baseline_forward(x, params, training=False)
        val_acc = evaluate(val_logits, g.labels, g.val_mask)
        if val_acc > best_val:
            best_val = val_acc
            best_snapshot = [p.data.copy() for p in params.tensors()]
            wait = 0
        else:
            wait += 1
            if wait >= mc.patience:
                break
    for p, snap in zip(params.tensors(), best_snapshot):
        p.data = snap
    return params, best_val


# ---- report emission ------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    teacher: str
    method: str
    mean_acc: float
    std_acc: float
    runs: int
    fingerprint: str


def emit_report(rows, fmt: str, path) -> None:
    """Write rows as CSV (fixed column order) or a JSON array; byte-stable."""
    rows = list(rows)
    if not rows:
        raise ContractError("emit_report: no rows")
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["teacher", "method", "mean_acc", "std_acc", "runs", "fingerprint"])
            for r in rows:
                writer.writerow([r.teacher, r.method, f"{r.mean_acc:.6f}",
                                 f"{r.std_acc:.6f}", r.runs, r.fingerprint])
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([dataclasses.asdict(r) for r in rows], fh, indent=2)
            fh.write("\n")
    else:
        raise ContractError(f"unknown report format {fmt!r}")


def report_rows_from_json(path) -> list[ReportRow]:
    with open(path, "r", encoding="utf-8") as fh:
        return [ReportRow(**obj) for obj in json.load(fh)]


@dataclass
class ExperimentResult:
    rows: list[ReportRow]
    failures: list[str]
    histories: dict  # (kind, seed) -> distilled-student EpochRecords


def run_experiment(cfg: ExperimentConfig, g: Graph | None = None) -> ExperimentResult:
    """Per seed and teacher kind: train teacher, MLP, distilled and undistilled
    students; aggregate mean/std test accuracy into report rows."""
    cfg.validate()
    if g is None:
        g = load_graph(cfg.resolve_data_path())
    fingerprint = cfg.fingerprint()
    undistilled_cfg = dataclasses.replace(cfg.distill, lam=1.0, schedule="constant")

    failures: list[str] = []
    histories: dict = {}
    mlp_cache: dict[int, float] = {}
    rows: list[ReportRow] = []

    for kind in cfg.teachers:
        accs: dict[str, list[float]] = {m: [] for m in METHODS}
        for r in range(cfg.runs):
            seed = cfg.seed + r
            try:
                _, artifacts, _ = train_teacher(g, cfg, kind=kind, seed=seed)
                accs["teacher"].append(evaluate(artifacts.logits, g.labels, g.test_mask))
            except TrainingDivergenceError as e:
                failures.append(f"{kind}/teacher/seed={seed}: {e}")
                continue

            if seed not in mlp_cache:
                try:
                    mlp_params, _ = train_mlp(g, cfg, seed=seed)
                    with T.no_grad():
                        x_mlp = FeatureMatrix.from_array(g.features, row_normalize=cfg.row_normalize)
                        logits = mlp_baseline_forward(x_mlp, mlp_params, training=False)
                    mlp_cache[seed] = evaluate(logits, g.labels, g.test_mask)
                except TrainingDivergenceError as e:
                    failures.append(f"{kind}/mlp/seed={seed}: {e}")
            if seed in mlp_cache:
                accs["mlp"].append(mlp_cache[seed])

            for method, dcfg in (("student-distilled", cfg.distill),
                                 ("student-undistilled", undistilled_cfg)):
                try:
                    s_params, hist = distill_train(g, artifacts, cfg, seed=seed,
                                                   distill_cfg=dcfg)
                    x_s = _student_input(g, artifacts, cfg)
                    with T.no_grad():
                        s_out = student_forward(x_s, s_params, cfg.student, training=False)
                    accs[method].append(evaluate(s_out.logits, g.labels, g.test_mask))
                    if method == "student-distilled":
                        histories[(kind, seed)] = hist
                except TrainingDivergenceError as e:
                    failures.append(f"{kind}/{method}/seed={seed}: {e}")

        for method in METHODS:
            vals = accs[method]
            if not vals:
                continue
            rows.append(ReportRow(
                teacher=kind, method=method,
                mean_acc=float(np.mean(vals)), std_acc=float(np.std(vals)),
                runs=len(vals), fingerprint=fingerprint))

    return ExperimentResult(rows=rows, failures=failures, histories=histories)


# ---- gradient-check harness -------------------------------------------------------

GRADCHECK_TEACHER = TeacherConfig(layers=2, hidden=8, heads=2, final_heads=1, dropout=0.0)
GRADCHECK_STUDENT = StudentConfig(d_model=16, heads=2, d_ff=32, layers=2, dropout=0.0)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-4) -> float:
    """max |a - f| / max(|a| + |f|, floor); the floor keeps finite-difference
    noise on near-zero entries from registering as error."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(f), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def grad_check(cfg: ExperimentConfig, instance_size: int = 5,
               lam: float | None = None, h: float = 1e-5) -> float:
    """Analytic vs central-finite-difference gradients of the combined loss
    over every student parameter, on a tiny synthetic instance.

    Model widths are gradcheck-scale (every parameter kind is present); the
    distillation settings and input mode come from ``cfg``.
    """
    if instance_size > 8:
        raise ContractError(f"gradcheck instances are capped at 8 nodes, got {instance_size}")
    dcfg = cfg.distill if lam is None else dataclasses.replace(cfg.distill, lam=lam,
                                                               schedule="constant")
    dcfg = dcfg.validate()
    g = synth_graph(seed=cfg.seed, n=instance_size, classes=2, p_in=0.9, p_out=0.5,
                    feature_dim=4)
    probe_cfg = dataclasses.replace(cfg, teacher=GRADCHECK_TEACHER,
                                    student=dataclasses.replace(
                                        GRADCHECK_STUDENT, input_mode=cfg.student.input_mode))

    rng = np.random.default_rng([cfg.seed, PHASE_TEACHER])
    t_params = init_teacher_params("gcn", g.features.shape[1], g.num_classes, probe_cfg, rng)
    artifacts = teacher_forward(g, t_params, probe_cfg)

    x = _student_input(g, artifacts, probe_cfg)
    s_rng = np.random.default_rng([cfg.seed, PHASE_STUDENT])
    s_params = init_student_params(x.shape[1], g.num_classes, probe_cfg.student, s_rng)
    k_scales = min(dcfg.k_scales or artifacts.depth, artifacts.depth)
    multi = multiscale_loss(artifacts.layer_embeddings, g.edges,
                            k_scales=k_scales, sign=dcfg.multiscale_sign)

    def loss_value() -> Tensor:
        out = student_forward(x, s_params, probe_cfg.student, training=False)
        cls_term = cls_loss(out.logits, g.labels, g.train_mask)
        micro_term = micro_loss(artifacts.logits, out.logits, g.edges, dcfg.tau)
        macro_term = macro_loss(artifacts.logits, out.logits, g.edges, dcfg.tau)
        total, _ = total_loss(cls_term, micro_term, macro_term, multi, dcfg, epoch=0)
        return total

    loss = loss_value()
    loss.backward()
    worst = 0.0
    for _, p in s_params.named_tensors():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                up = loss_value().item()
            flat[i] = orig - h
            with T.no_grad():
                down = loss_value().item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
