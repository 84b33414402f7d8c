"""Experiment configuration, training loop, evaluation, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import dku as dkum
from . import fuzzy
from . import metrics as mx
from . import model as mdl
from . import rulebase as rbm
from . import synthetic

log = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"

VARIANTS = ("baseline", "v1", "v2")


class ConfigError(Exception):
    pass


class TrainingDiverged(Exception):
    def __init__(self, step: int, terms: dict, max_grad: float):
        self.step = step
        self.terms = terms
        self.max_grad = max_grad
        super().__init__(
            f"non-finite loss at step {step}: terms={terms}, max|grad|={max_grad:.3e}"
        )


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    klue_variant: str = "v1"
    enable_sat: bool = True
    seed: int = 0
    alpha_temp: float = 5.0
    tau: float = 5.0
    yager_p: float = 2.0
    sigmoid_slope: float = 9.0
    sat_p: float = 2.0
    lambda_class: float = 0.01
    lambda_concept: float = 0.1
    lambda_sat: float = 1.0
    embed_dim: int = 32
    n_concepts: int = 24
    backbone: str = "linear"
    hidden_dim: int = 64
    task: synthetic.SyntheticTaskSpec = field(
        default_factory=synthetic.SyntheticTaskSpec
    )
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.klue_variant not in VARIANTS:
            raise ConfigError(f"unknown klue_variant {self.klue_variant!r}")
        if isinstance(self.task, dict):
            self.task = synthetic.SyntheticTaskSpec.from_dict(self.task)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    def config_hash(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def uses_dku(self) -> bool:
        return self.klue_variant != "baseline"

    def semantics(self) -> fuzzy.FuzzySemantics:
        common = dict(
            yager_p=self.yager_p,
            sigmoid_slope=self.sigmoid_slope,
            tau=self.tau,
            sat_p=self.sat_p,
        )
        if self.klue_variant == "v2":
            return fuzzy.FuzzySemantics.v2(**common)
        return fuzzy.FuzzySemantics.v1(**common)

    def loss_weights(self) -> mdl.LossWeights:
        return mdl.LossWeights(
            lambda_class=self.lambda_class,
            lambda_concept=self.lambda_concept,
            lambda_sat=self.lambda_sat,
        )

    def check_dims(self, rb: rbm.RuleBase) -> None:
        problems = []
        if rb.K != self.task.n_classes:
            problems.append(
                f"rule base K={rb.K} != task n_classes={self.task.n_classes}"
            )
        if rb.T != self.n_concepts:
            problems.append(
                f"rule base T={rb.T} != model n_concepts={self.n_concepts}"
            )
        if problems:
            raise ConfigError("; ".join(problems))


def build_model(cfg: ExperimentConfig) -> mdl.KlueModel:
    dims = mdl.ModelDims(
        feature_dim=cfg.task.feature_dim,
        embed_dim=cfg.embed_dim,
        n_classes=cfg.task.n_classes,
        n_concepts=cfg.n_concepts,
        backbone=cfg.backbone,
        hidden_dim=cfg.hidden_dim,
    )
    dku_config = dkum.DkuConfig(
        alpha_temp=cfg.alpha_temp, semantics=cfg.semantics()
    )
    rng = np.random.default_rng([cfg.seed, 0x11071])
    return mdl.KlueModel(dims, dku_config, rng=rng)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: mdl.KlueModel, x: np.ndarray, rb, use_dku: bool,
            batch_size: int = 512):
    """Initial and refined class probabilities plus concept probabilities,
    without building gradient graphs."""
    outs_p, outs_pd, outs_pc = [], [], []
    with ad.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start : start + batch_size]
            z, p_class, p_concept = model.forward(xb)
            if use_dku:
                truths = dkum.evaluate_forward_rules(
                    p_class, p_concept, rb, model.dku_config
                )
                delta = dkum.compute_delta(
                    truths, model.dku_config, batch_size=xb.shape[0]
                )
                _, p_delta = dkum.refine_logits(z, delta, model.dku_config)
            else:
                p_delta = p_class
            outs_p.append(p_class.value)
            outs_pd.append(p_delta.value)
            outs_pc.append(p_concept.value)
    return (
        np.concatenate(outs_p),
        np.concatenate(outs_pd),
        np.concatenate(outs_pc),
    )


def evaluate(model: mdl.KlueModel, ds: synthetic.Dataset, rb,
             use_dku: bool) -> dict:
    """mAP and mean AUC for both initial and refined probabilities."""
    if len(ds) == 0:
        raise mx.MetricsError("evaluate: empty dataset")
    p, p_delta, _ = predict(model, ds.x, rb, use_dku)
    initial = mx.multilabel_report(p, ds.labels)
    refined = mx.multilabel_report(p_delta, ds.labels)
    return {
        "mAP_initial": initial.mean_ap,
        "mAP_refined": refined.mean_ap,
        "AUC_initial": initial.mean_auc,
        "AUC_refined": refined.mean_auc,
        "skipped_classes": initial.skipped_classes,
    }


def concept_recovery_score(model: mdl.KlueModel, ds: synthetic.Dataset,
                           rb) -> mx.ConceptRecoveryReport:
    _, _, p_concept = predict(model, ds.x, rb, use_dku=False)
    return mx.concept_recovery(p_concept, ds.latents)


# ---------------------------------------------------------------------------
# training loop


def train_model(
    cfg: ExperimentConfig,
    task: synthetic.SyntheticTask,
    rb: rbm.RuleBase,
    metrics_sink=None,
):
    """Minibatch optimization of the composite loss; deterministic by seed.

    ``metrics_sink`` receives one dict per epoch (the metrics stream).
    Returns (model, history).
    """
    cfg.check_dims(rb)
    model = build_model(cfg)
    opt = mdl.Adam(
        model.params,
        lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        weight_decay=cfg.optimizer.weight_decay,
    )
    batch_rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    weights = cfg.loss_weights()
    use_dku = cfg.uses_dku()
    use_sat = cfg.enable_sat and use_dku
    history = []
    n = len(task.train)
    step = 0
    for epoch in range(cfg.optimizer.epochs):
        order = batch_rng.permutation(n)
        term_sums: dict = {}
        total_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.optimizer.batch_size):
            idx = order[start : start + cfg.optimizer.batch_size]
            xb, yb = task.train.x[idx], task.train.labels[idx]
            try:
                total, parts = mdl.total_loss(
                    model, xb, yb, rb, weights, use_dku=use_dku, use_sat=use_sat
                )
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(step, {"forward": str(exc)}, float("nan"))
            opt.zero_grad()
            ad.backward(total)
            max_grad = max(
                (float(np.max(np.abs(p.grad))) for p in model.params.values()
                 if p.grad is not None),
                default=0.0,
            )
            if not np.isfinite(total.value) or not np.isfinite(max_grad):
                raise TrainingDiverged(
                    step,
                    {k: float(v.value) for k, v in parts.items()},
                    max_grad,
                )
            opt.step()
            model.check_finite()
            total_sum += float(total.value)
            for name, node in parts.items():
                term_sums[name] = term_sums.get(name, 0.0) + float(node.value)
            n_batches += 1
            step += 1
        record = {
            "epoch": epoch,
            "loss_total": total_sum / n_batches,
            "loss_terms": {k: v / n_batches for k, v in sorted(term_sums.items())},
        }
        for split_name, ds in (("train", task.train), ("val", task.val)):
            split_metrics = evaluate(model, ds, rb, use_dku)
            record[split_name] = {
                k: v for k, v in split_metrics.items() if k != "skipped_classes"
            }
        history.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        log.info(
            "epoch %d: loss=%.4f val mAP_refined=%.4f AUC_refined=%.4f",
            epoch,
            record["loss_total"],
            record["val"]["mAP_refined"],
            record["val"]["AUC_refined"],
        )
    return model, history


# ---------------------------------------------------------------------------
# checkpoints and metrics streams


def save_checkpoint(path, model: mdl.KlueModel, opt: Optional[mdl.Adam],
                    cfg: ExperimentConfig, epoch: int,
                    rng_state: Optional[dict] = None) -> None:
    doc = {
        "format_version": 1,
        "tool_version": TOOL_VERSION,
        "config_hash": cfg.config_hash(),
        "config": json.loads(cfg.to_json()),
        "epoch": epoch,
        "params": model.state_dict(),
        "optimizer": opt.state_dict() if opt is not None else None,
        "rng_state": rng_state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Returns (config, model, checkpoint document)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ConfigError(
            f"unsupported checkpoint format version {doc.get('format_version')!r}"
        )
    cfg = ExperimentConfig(**doc["config"])
    model = build_model(cfg)
    model.load_state_dict(doc["params"])
    return cfg, model, doc


def metrics_record_line(record: dict, cfg: ExperimentConfig) -> str:
    payload = dict(record)
    payload["variant"] = cfg.klue_variant
    payload["config_hash"] = cfg.config_hash()
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
