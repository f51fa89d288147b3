"""Evaluation: MAE/RMSE metrics, ablations, attention export, benchmarks.

Predictions are clipped to the [1, 5] rating scale before computing
metrics.  Ablation runs share the corpus, splits, and seed protocol with
the full model so comparisons are apples to apples.  The attention trace
export serializes word- and review-level weights for one user-item pair.
The complexity benchmark times the interaction module over a sweep of
review counts and fits the measured times against the expected cost
model (an m*n distance term plus an (m+n) attention term at fixed k).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import review_interaction
from .corpus import DataError, assemble_batch, assemble_example, ExampleBatch
from .model import HTIModel, HyperParams
from .predictor import clip_ratings

EVAL_BATCH = 256


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    n_examples: int
    per_run: list = field(default_factory=list)  # (mae, rmse) per seed for repeated runs
    train_seconds: float = 0.0
    test_seconds: float = 0.0

    def to_dict(self):
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "n_examples": self.n_examples,
            "per_run": [list(r) for r in self.per_run],
            "train_seconds": self.train_seconds,
            "test_seconds": self.test_seconds,
        }


def metrics_from_residuals(residuals):
    residuals = np.asarray(residuals, dtype=np.float64)
    mae = float(np.abs(residuals).mean())
    rmse = float(np.sqrt((residuals ** 2).mean()))
    return mae, rmse


def predict_split(model, corpus, split):
    """Clipped predictions and targets over one split, in corpus order."""
    ids = corpus.split_indices(split)
    if not ids:
        raise DataError(f"empty split {split!r}")
    preds = np.empty(len(ids), dtype=np.float64)
    targets = np.empty(len(ids), dtype=np.float64)
    with nm.no_grad():
        for lo in range(0, len(ids), EVAL_BATCH):
            chunk = ids[lo : lo + EVAL_BATCH]
            batch = assemble_batch(corpus, chunk)
            raw, _ = model.forward(batch, train=False)
            preds[lo : lo + len(chunk)] = raw.data.astype(np.float64)
            targets[lo : lo + len(chunk)] = batch.ratings
    return clip_ratings(preds), targets


def evaluate(model, corpus, split="test"):
    t0 = time.perf_counter()
    preds, targets = predict_split(model, corpus, split)
    mae, rmse = metrics_from_residuals(targets - preds)
    return MetricsReport(mae=mae, rmse=rmse, n_examples=len(preds),
                         test_seconds=time.perf_counter() - t0)


def run_repeated(corpus, hyper: HyperParams, variant="full", seeds=(0, 1, 2), split="test",
                 embeddings=None, verbose=False):
    """Train once per seed and report per-run and mean metrics."""
    from .trainer import train

    per_run = []
    train_seconds = 0.0
    test_seconds = 0.0
    n = 0
    for seed in seeds:
        h = HyperParams.from_dict({**hyper.to_dict(), "seed": int(seed)})
        t0 = time.perf_counter()
        result = train(corpus, h, variant=variant, embeddings=embeddings, verbose=verbose)
        train_seconds += time.perf_counter() - t0
        rep = evaluate(result.model, corpus, split)
        per_run.append((rep.mae, rep.rmse))
        test_seconds += rep.test_seconds
        n = rep.n_examples
    maes = [m for m, _ in per_run]
    rmses = [r for _, r in per_run]
    return MetricsReport(mae=float(np.mean(maes)), rmse=float(np.mean(rmses)), n_examples=n,
                         per_run=per_run, train_seconds=train_seconds, test_seconds=test_seconds)


def run_ablation(variant, corpus, hyper: HyperParams, seeds=(0, 1, 2), split="test",
                 embeddings=None, verbose=False):
    """Train and evaluate one variant under the shared seed protocol."""
    from .model import VARIANTS

    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return run_repeated(corpus, hyper, variant=variant, seeds=seeds, split=split,
                        embeddings=embeddings, verbose=verbose)


# -- attention trace export -------------------------------------------------


def effective_review_weights(trace_interaction, side):
    """Scalar per-review weights blending the two attention stages.

    The gate is a vector over latent coordinates; its mean is used as the
    scalar blend so the result still sums to 1 over valid reviews.
    """
    if side == "user":
        delta, beta, gate = (trace_interaction.delta_user, trace_interaction.beta_user,
                             trace_interaction.gate_user)
    else:
        delta, beta, gate = (trace_interaction.delta_item, trace_interaction.beta_item,
                             trace_interaction.gate_item)
    g = gate.mean(axis=-1, keepdims=True)
    return g * delta + (1.0 - g) * beta


def export_attention_trace(model, corpus, user_id, item_id, top_r=4, path=None):
    """Word- and review-level attention for one pair as a JSON-able dict."""
    if model.variant != "full":
        raise DataError("attention traces require the full model variant")
    if user_id not in corpus.user_index:
        raise DataError(f"unknown user id {user_id!r}")
    if item_id not in corpus.item_index:
        raise DataError(f"unknown item id {item_id!r}")
    user_idx = corpus.user_index[user_id]
    item_idx = corpus.item_index[item_id]
    true_rating = None
    for x in corpus.interactions:
        if x.user_idx == user_idx and x.item_idx == item_idx:
            true_rating = x.rating
            break

    example = assemble_example(corpus, user_idx, item_idx, true_rating if true_rating is not None else 0.0)
    batch = ExampleBatch(
        user_idx=np.array([user_idx]),
        item_idx=np.array([item_idx]),
        ratings=np.array([example.rating]),
        user_tokens=example.user_tokens[None],
        user_token_mask=example.user_token_mask[None],
        user_review_mask=example.user_review_mask[None],
        item_tokens=example.item_tokens[None],
        item_token_mask=example.item_token_mask[None],
        item_review_mask=example.item_review_mask[None],
    )
    with nm.no_grad():
        _, trace = model.forward(batch, train=False, capture_trace=True)

    def side_payload(side, tokens, token_mask, review_mask, alpha):
        weights = effective_review_weights(trace.interaction, side)[0]
        delta = (trace.interaction.delta_user if side == "user" else trace.interaction.delta_item)[0]
        beta = (trace.interaction.beta_user if side == "user" else trace.interaction.beta_item)[0]
        valid = np.flatnonzero(review_mask)
        ranked = valid[np.argsort(-weights[valid], kind="stable")][:top_r]
        reviews = []
        for r in ranked:
            words = corpus.vocabulary.decode(tokens[r][token_mask[r]].tolist())
            reviews.append({
                "rank": len(reviews) + 1,
                "weight": float(weights[r]),
                "initial_weight": float(delta[r]),
                "guided_weight": float(beta[r]),
                "words": words,
                "word_weights": [float(w) for w in alpha[0, r][token_mask[r]]],
            })
        return {
            "reviews": reviews,
            "all_weights": [float(w) for w in weights[valid]],
            "all_initial_weights": [float(w) for w in delta[valid]],
            "all_guided_weights": [float(w) for w in beta[valid]],
        }

    payload = {
        "user_id": user_id,
        "item_id": item_id,
        "predicted_rating": float(clip_ratings(trace.predictions)[0]),
        "true_rating": true_rating,
        "user_side": side_payload("user", example.user_tokens, example.user_token_mask,
                                  example.user_review_mask, trace.alpha_user),
        "item_side": side_payload("item", example.item_tokens, example.item_token_mask,
                                  example.item_review_mask, trace.alpha_item),
    }
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
    return payload


# -- complexity benchmark ----------------------------------------------------


def distance_flops(m, n, k):
    """Fused-op count for the m x n distance matrix.

    Counting rule (see docs/cli.md): per entry, k subtractions, k
    squarings, and k-1 additions; the square root is not counted.
    """
    return m * n * (3 * k - 1)


def interaction_flops(m, n, k):
    """Distance term plus the k^2 (m + n) attention/gate term."""
    return distance_flops(m, n, k) + (m + n) * (3 * k * k) + 2 * (2 * k * k)


def benchmark_interaction(sweep=(5, 10, 20), k_lat=32, batch=64, repeats=5, seed=0,
                          inner_loops=None):
    """Median-of-repeats forward timings of the interaction module.

    Returns a list of rows {m, n, k, seconds, flops}; seconds is for one
    batch-of-``batch`` forward pass (min over repeats of the per-loop
    mean), flops is the per-example fused-op count of the distance term.
    """
    rng = np.random.default_rng(seed)
    from .numerics import ParamTape

    tape = ParamTape()
    review_interaction.init_interaction_params(tape, rng, k_lat, dtype=np.float64)
    rows = []
    for m in sweep:
        for n in sweep:
            u = rng.standard_normal((batch, m, k_lat))
            v = rng.standard_normal((batch, n, k_lat))
            um = np.ones((batch, m), dtype=bool)
            vm = np.ones((batch, n), dtype=bool)
            loops = inner_loops or max(1, int(2000 / (m * n)))
            best = np.inf
            with nm.no_grad():
                review_interaction.aggregate(tape, nm.as_tensor(u), nm.as_tensor(v), um, vm)  # warmup
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    for _ in range(loops):
                        review_interaction.aggregate(tape, nm.as_tensor(u), nm.as_tensor(v), um, vm)
                    best = min(best, (time.perf_counter() - t0) / loops)
            rows.append({"m": m, "n": n, "k": k_lat, "seconds": best,
                         "flops": distance_flops(m, n, k_lat)})
    return rows


def fit_mn_scaling(rows):
    """Least-squares fit seconds ~ a + b*(m*n) + c*(m+n); returns max |rel residual|."""
    x = np.array([[1.0, r["m"] * r["n"], r["m"] + r["n"]] for r in rows])
    y = np.array([r["seconds"] for r in rows])
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    fitted = x @ coef
    rel = np.abs(fitted - y) / y
    return float(rel.max()), coef


def write_benchmark_csv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("m,n,k,seconds,flops\n")
        for r in rows:
            f.write(f"{r['m']},{r['n']},{r['k']},{r['seconds']:.9f},{r['flops']}\n")
