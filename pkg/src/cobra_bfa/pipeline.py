"""End-to-end attack orchestration: run configuration, the attack pipeline, and reports.

Pipeline order: gradients (skipped in gradient-free mode) -> layer ranking ->
initial subset cutoff -> exclusionary reduction -> held-out evaluation.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

from . import kernels
from .container import EncodedModel, atomic_write, save_model
from .corpus import CorpusSpec, calibration_batch, heldout_batch, training_batch
from .errors import ConfigError, GradientUnavailableError, StageError
from .fault_injector import FlipSet, FlipOverlay, apply_flips_destructive
from .grad_engine import backward
from .sensitivity import (LossEvaluator, SensitivityConfig, attack_bit, rank_layers, records_csv,
                          select_initial_subset)
from .ssm_model import ModelConfig, accuracy, cross_entropy, forward_logits, init_params, perplexity
from .subset_optimizer import ReductionConfig, reduce_subset, trace_csv
from .training import TrainConfig, train

REPORT_NAME = "attack_report.json"
LAYER_CSV = "layer_sensitivity.csv"
TRACE_CSV = "optimization_trace.csv"
FLIPSET_NAME = "flipset.json"
ATTACKED_NAME = "attacked_model.cobr"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    storage_format: str = "fp16"
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradient_free: bool = False
    graybox_last_k: int = None
    attack_bit_override: int = None

    def __post_init__(self):
        if self.storage_format not in ("fp16", "int8", "int4"):
            raise ConfigError(f"unknown storage format {self.storage_format!r}")
        if self.corpus.vocab_size != self.model.vocab_size:
            raise ConfigError("corpus and model vocabulary sizes differ")

    def to_dict(self):
        d = asdict(self)
        d["sensitivity"]["attackable_types"] = list(self.sensitivity.attackable_types)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"model": ModelConfig, "sensitivity": SensitivityConfig, "reduction": ReductionConfig,
               "corpus": CorpusSpec, "train": TrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        for key, typ in sub.items():
            if key in d and not isinstance(d[key], typ):
                d[key] = typ(**d[key])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def effective_sensitivity(self):
        sens = SensitivityConfig(**{f.name: getattr(self.sensitivity, f.name) for f in fields(SensitivityConfig)})
        if self.gradient_free:
            sens.alpha = 0.0
        if self.graybox_last_k is not None:
            sens.visible_layers = int(self.graybox_last_k)
        return sens


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def json_number(value):
    """Finite floats pass through; non-finite ones become "inf" / "-inf" / "nan"."""
    value = float(value)
    if math.isfinite(value):
        return value
    if math.isnan(value):
        return "nan"
    return "inf" if value > 0 else "-inf"


def metric_block(loss, acc):
    ppl = perplexity(loss)
    return {
        "loss": json_number(loss),
        "loss_nonfinite": not math.isfinite(loss),
        "perplexity": json_number(ppl),
        "perplexity_nonfinite": not math.isfinite(ppl),
        "accuracy": float(acc),
    }


def dump_report(report):
    return json.dumps(report, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def strip_timings(report):
    return {k: v for k, v in report.items() if k != "timings"}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def generate(cfg):
    """Seeded initial model, encoded in the run's storage format."""
    return EncodedModel.from_params(init_params(cfg.model), cfg.storage_format)


def train_model(model, cfg):
    batch = training_batch(cfg.corpus)
    params, losses = train(model.decoded(), batch, cfg.train)
    return EncodedModel.from_params(params, model.kind), losses


def evaluate(model, corpus, flips=None):
    """Loss, perplexity and last-token accuracy on the held-out batch."""
    batch = heldout_batch(corpus)
    params = FlipOverlay(model, flips).params() if flips else model.decoded()
    logits = forward_logits(params, batch)
    return metric_block(cross_entropy(logits, batch.targets), accuracy(logits, batch.targets, "last"))


def _stage(name, timings, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def run_attack(model, cfg, out_dir=None):
    """Execute the whole attack; returns ``(report, reduced FlipSet)``.

    When ``out_dir`` is given, artifacts are written there as each becomes
    available, so a failing stage still leaves the earlier ones on disk.
    """
    timings = {}
    sens = cfg.effective_sensitivity()
    calib = calibration_batch(cfg.corpus)
    bit = attack_bit(model, cfg.attack_bit_override)
    evaluator = LossEvaluator(model, calib)
    artifacts = {}

    def flush(name, data):
        artifacts[name] = data
        if out_dir is not None:
            atomic_write(os.path.join(out_dir, name), data)

    grads = None
    gradient_mode = "gradient_free" if cfg.gradient_free else "hybrid"
    if not cfg.gradient_free and sens.alpha > 0:
        try:
            _, grads = _stage("gradients", timings, backward, model.decoded(), calib)
        except StageError as exc:
            if not isinstance(exc.cause, GradientUnavailableError):
                raise
            sens.alpha = 0.0
            gradient_mode = "fallback_alpha0"

    records, _ = _stage("rank", timings, rank_layers, model, grads, sens, bit=bit, evaluator=evaluator)
    flush(LAYER_CSV, records_csv(records))

    initial = _stage("initial_subset", timings, select_initial_subset, records[0], sens, bit=bit, evaluator=evaluator)
    i_init = initial.flips
    red = _stage("reduce", timings, reduce_subset, model, i_init, cfg.reduction, evaluator=evaluator)
    flush(TRACE_CSV, trace_csv(red.trace))
    flush(FLIPSET_NAME, red.reduced.to_json() + "\n")

    baseline = _stage("evaluate", timings, evaluate, model, cfg.corpus)
    attacked = _stage("evaluate_attacked", timings, evaluate, model, cfg.corpus, red.reduced)
    calib_base = evaluator(FlipSet())
    calib_red = evaluator(red.reduced)

    total_bits = model.total_bits
    report = {
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "storage_format": model.kind.value,
        "attack_bit": bit,
        "gradient_mode": gradient_mode,
        "alpha_used": sens.alpha,
        "model_checksum": f"{model.checksum():016x}",
        "total_parameters": model.num_parameters,
        "total_bits": total_bits,
        "baseline": baseline,
        "post_attack": attacked,
        "calibration": {
            "baseline_loss": json_number(calib_base.raw_loss),
            "attacked_loss": json_number(calib_red.raw_loss),
            "attacked_loss_saturated": calib_red.loss,
            "attacked_nonfinite": calib_red.nonfinite,
        },
        "layer_ranking": [
            {"layer_id": r.layer_id, "type": r.layer_type, "k": r.k_used, "loss": r.loss_after_flips,
             "efficiency": r.efficiency, "nonfinite": r.nonfinite}
            for r in records
        ],
        "initial_subset": {
            "layer_id": records[0].layer_id,
            "crossing": initial.crossing,
            "operating_point": initial.operating_point,
            "reached": initial.reached,
            "loss": initial.loss,
            "prefix_losses": list(initial.prefix_losses),
        },
        "I_init": [l.to_json() for l in i_init],
        "I_red": [l.to_json() for l in red.reduced],
        "flip_count": len(red.reduced),
        "flipped_bit_fraction": len(red.reduced) / total_bits,
        "trace_summary": {
            "iterations": len(red.trace),
            "initial_size": len(i_init),
            "final_size": len(red.reduced),
            "loss_orig": red.loss_orig,
            "final_loss": red.final_loss,
            "feasible": red.feasible,
            "evaluations": evaluator.calls,
        },
        "backend": kernels.backend(),
        "timings": {k: round(v, 6) for k, v in timings.items()},
    }

    flush(REPORT_NAME, dump_report(report))
    if out_dir is not None:
        attacked_model = apply_flips_destructive(model.copy(), red.reduced)
        save_model(attacked_model, os.path.join(out_dir, ATTACKED_NAME))
    return report, red.reduced


def report_to_csv(report):
    """Re-render a saved report's ranking and flip set as CSV text blocks."""
    import csv
    import io

    out = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "type", "k", "loss", "efficiency", "nonfinite"])
    for r in report["layer_ranking"]:
        w.writerow([r["layer_id"], r["type"], r["k"], repr(float(r["loss"])), repr(float(r["efficiency"])),
                    int(r["nonfinite"])])
    out[LAYER_CSV] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tensor", "index", "bit"])
    for loc in report["I_red"]:
        w.writerow([loc["tensor"], loc["index"], loc["bit"]])
    out["flips.csv"] = buf.getvalue()
    return out

