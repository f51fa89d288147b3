"""Review-level interaction: distance attention, cross guidance, gated fusion.

The user's and the item's review vectors are aggregated in three stages.
First each side gets an initial summary whose attention favors reviews
with a small minimum Euclidean distance to the counterpart side.  Each
initial summary then guides an additive attention over the other side's
reviews, producing an intermediate summary that highlights the reviews
most relevant to the counterpart.  A gate network (parameters shared by
both sides) blends initial and intermediate summaries into the final
aggregated representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm


def init_interaction_params(tape, rng, k_lat, dtype=np.float32):
    from .word_encoder import glorot_uniform

    for name in ("int.user.W_guide", "int.user.W_self", "int.item.W_guide", "int.item.W_self",
                 "int.gate.W1", "int.gate.W2"):
        tape.add(name, glorot_uniform(rng, (k_lat, k_lat), k_lat, k_lat, dtype))
    tape.add("int.user.v", glorot_uniform(rng, (k_lat, 1), k_lat, 1, dtype))
    tape.add("int.item.v", glorot_uniform(rng, (k_lat, 1), k_lat, 1, dtype))
    for name in ("int.user.b", "int.item.b", "int.gate.b"):
        tape.add(name, np.zeros(k_lat, dtype=dtype))


@dataclass
class InteractionTrace:
    """Detached intermediate values of one aggregation pass."""

    distances: np.ndarray  # (B, m, n); +inf where either review is invalid
    delta_user: np.ndarray  # (B, m)
    delta_item: np.ndarray  # (B, n)
    beta_user: np.ndarray  # (B, m)
    beta_item: np.ndarray  # (B, n)
    gate_user: np.ndarray  # (B, k)
    gate_item: np.ndarray  # (B, k)


def pairwise_distances(user_reps, item_reps):
    """Euclidean distance between every user/item review pair: (B, m, n)."""
    b, m, k = user_reps.shape
    n = item_reps.shape[1]
    du = nm.reshape(user_reps, (b, m, 1, k))
    dv = nm.reshape(item_reps, (b, 1, n, k))
    diff = nm.sub(du, dv)
    return nm.sqrt(nm.tsum(nm.square(diff), axis=-1))


def initial_representations(user_reps, item_reps, distances, user_mask, item_mask):
    """Distance-attention summaries p (user side) and q (item side).

    Each review's score is the negated minimum distance to the valid
    counterpart reviews; rows with no valid counterpart fall back to a
    uniform attention over their own valid reviews.  A side with no valid
    reviews yields the zero vector with all-zero weights.
    """
    valid_pairs = user_mask[:, :, None] & item_mask[:, None, :]
    a = nm.min_reduce(distances, axis=2, valid=valid_pairs, empty_fill=0.0)
    bmin = nm.min_reduce(distances, axis=1, valid=valid_pairs, empty_fill=0.0)
    delta_u = nm.masked_softmax(nm.mul(a, -1.0), user_mask, axis=-1)
    delta_v = nm.masked_softmax(nm.mul(bmin, -1.0), item_mask, axis=-1)
    p = nm.tsum(nm.mul(user_reps, nm.reshape(delta_u, delta_u.shape + (1,))), axis=1)
    q = nm.tsum(nm.mul(item_reps, nm.reshape(delta_v, delta_v.shape + (1,))), axis=1)
    return p, q, delta_u, delta_v


def intermediate_representation(tape, side, guide, reps, mask):
    """Additive attention over one side's reviews, guided by the other side.

    side is "user" or "item"; guide is the counterpart's initial summary.
    """
    b, r, k = reps.shape
    guided = nm.matmul(guide, tape[f"int.{side}.W_guide"])  # (B, k)
    selfed = nm.matmul(nm.reshape(reps, (b * r, k)), tape[f"int.{side}.W_self"])
    hidden = nm.tanh(
        nm.add(nm.add(nm.reshape(selfed, (b, r, k)), nm.reshape(guided, (b, 1, k))), tape[f"int.{side}.b"])
    )
    gamma = nm.reshape(nm.matmul(hidden, tape[f"int.{side}.v"]), (b, r))
    beta = nm.masked_softmax(gamma, mask, axis=-1)
    s = nm.tsum(nm.mul(reps, nm.reshape(beta, (b, r, 1))), axis=1)
    return s, beta


def gate_fuse(tape, initial, intermediate):
    """Convex blend g*initial + (1-g)*intermediate with a learned sigmoid gate."""
    g = nm.sigmoid(
        nm.add(
            nm.add(nm.matmul(initial, tape["int.gate.W1"]), nm.matmul(intermediate, tape["int.gate.W2"])),
            tape["int.gate.b"],
        )
    )
    fused = nm.add(nm.mul(g, initial), nm.mul(nm.sub(1.0, g), intermediate))
    return fused, g


def aggregate(tape, user_reps, item_reps, user_mask, item_mask, capture_trace=False):
    """Full interaction pass: (d_user, d_item, InteractionTrace or None)."""
    e = pairwise_distances(user_reps, item_reps)
    p, q, delta_u, delta_v = initial_representations(user_reps, item_reps, e, user_mask, item_mask)
    s_u, beta_u = intermediate_representation(tape, "user", q, user_reps, user_mask)
    t_v, beta_v = intermediate_representation(tape, "item", p, item_reps, item_mask)
    d_user, g_u = gate_fuse(tape, p, s_u)
    d_item, g_v = gate_fuse(tape, q, t_v)
    trace = None
    if capture_trace:
        valid_pairs = user_mask[:, :, None] & item_mask[:, None, :]
        dist = np.where(valid_pairs, e.data, np.inf)
        trace = InteractionTrace(
            distances=dist,
            delta_user=delta_u.data.copy(),
            delta_item=delta_v.data.copy(),
            beta_user=beta_u.data.copy(),
            beta_item=beta_v.data.copy(),
            gate_user=g_u.data.copy(),
            gate_item=g_v.data.copy(),
        )
    return d_user, d_item, trace


def pool_aggregate(user_reps, item_reps, user_mask, item_mask, mode):
    """Ablation path: pool review vectors directly into d_user and d_item.

    ``mode="avg"`` uses a uniform masked softmax through the shared
    weighted-sum path; ``mode="max"`` is a per-coordinate max over valid
    reviews.  A side with no valid reviews yields the zero vector.
    """
    if mode == "avg":
        def pooled(reps, mask):
            zeros = np.zeros(reps.shape[:-1], dtype=reps.dtype)
            w = nm.masked_softmax(nm.as_tensor(zeros), mask, axis=-1)
            return nm.tsum(nm.mul(reps, nm.reshape(w, w.shape + (1,))), axis=1)

        return pooled(user_reps, user_mask), pooled(item_reps, item_mask)
    if mode == "max":
        d_user = nm.max_reduce(user_reps, axis=1, valid=user_mask[:, :, None], empty_fill=0.0)
        d_item = nm.max_reduce(item_reps, axis=1, valid=item_mask[:, :, None], empty_fill=0.0)
        return d_user, d_item
    raise ValueError(f"unknown pooling mode {mode!r}")
