"""Rating prediction head and training loss.

Latent factors and aggregated review representations are combined
additively per side, expanded with their elementwise product, and passed
through an MLP with two relu hidden layers (widths halving) and a linear
output.  The loss is the mean squared residual plus an L2 penalty over
every learnable parameter except the frozen pad-embedding row.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .word_encoder import glorot_uniform


def mlp_widths(k_lat, n_hidden=2):
    """Layer widths from the combined input down to the scalar output."""
    widths = [3 * k_lat]
    for _ in range(n_hidden):
        widths.append(int(np.ceil(widths[-1] / 2)))
    widths.append(1)
    return widths


def init_predictor_params(tape, rng, n_users, n_items, k_lat, dtype=np.float32, latent_scale=0.1):
    tape.add("latent.user", (rng.standard_normal((n_users, k_lat)) * latent_scale).astype(dtype))
    tape.add("latent.item", (rng.standard_normal((n_items, k_lat)) * latent_scale).astype(dtype))
    widths = mlp_widths(k_lat)
    for layer, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        tape.add(f"mlp.{layer}.w", glorot_uniform(rng, (w_in, w_out), w_in, w_out, dtype))
        tape.add(f"mlp.{layer}.b", np.zeros(w_out, dtype=dtype))
    return widths


def combine(u_latent, d_user, v_latent, d_item):
    """h0 = [u + d_u ; v + d_v ; (u + d_u) * (v + d_v)]."""
    x = nm.add(u_latent, d_user)
    y = nm.add(v_latent, d_item)
    return nm.concat([x, y, nm.mul(x, y)], axis=-1)


def predict_mlp(tape, h0, train=False, dropout_rate=0.5, rng=None, n_hidden=2):
    """Raw (unclipped) rating estimates, shape (B,)."""
    h = h0
    for layer in range(1, n_hidden + 1):
        h = nm.relu(nm.add(nm.matmul(h, tape[f"mlp.{layer}.w"]), tape[f"mlp.{layer}.b"]))
        h = nm.dropout(h, dropout_rate, rng, train)
    out_layer = n_hidden + 1
    out = nm.add(nm.matmul(h, tape[f"mlp.{out_layer}.w"]), tape[f"mlp.{out_layer}.b"])
    return nm.reshape(out, (h0.shape[0],))


def l2_penalty(tape):
    """Sum of squared parameter values; skips the frozen pad-embedding row."""
    total = None
    for name, t in tape.items():
        body = nm.slice_rows(t, 1) if name == "embed.W_e" else t
        term = nm.tsum(nm.square(body))
        total = term if total is None else nm.add(total, term)
    return total


def loss(predictions, targets, tape, l2_lambda):
    """Mean squared residual plus lambda * sum of squared parameters."""
    if not np.isfinite(predictions.data).all():
        raise FloatingPointError(
            f"non-finite prediction (min={np.nanmin(predictions.data)}, max={np.nanmax(predictions.data)})"
        )
    residual = nm.sub(nm.as_tensor(np.asarray(targets, dtype=predictions.dtype)), predictions)
    value = nm.tmean(nm.square(residual))
    if l2_lambda > 0:
        value = nm.add(value, nm.mul(l2_penalty(tape), l2_lambda))
    return value


def clip_ratings(values, low=1.0, high=5.0):
    """Clamp raw predictions to the rating scale (evaluation only)."""
    return np.clip(values, low, high)
