"""Full model assembly: parameters, forward pass, and variants.

Wires the word encoder, review interaction, and prediction head together
over a parameter tape.  The ablation variants swap the word-level
attention for mean/max pooling over word vectors (wavg, wmax) or the
whole review-level interaction for mean/max pooling over review vectors
(davg, dmax).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import predictor, review_interaction, word_encoder
from .numerics import ParamTape

VARIANTS = ("full", "wavg", "wmax", "davg", "dmax")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class HyperParams:
    """Training and architecture knobs; defaults follow the reference setup."""

    batch_size: int = 128
    learning_rate: float = 1e-4
    l2_lambda: float = 1e-5
    dropout: float = 0.5
    embed_dim: int = 100
    k1: int = 50
    k_lat: int = 32
    kernel_sizes: tuple = (3, 5)
    layer2_kernel: int = 5
    max_epochs: int = 60
    patience: int = 10
    grad_clip: float = 5.0
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        numeric_positive = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "embed_dim": self.embed_dim,
            "k1": self.k1,
            "k_lat": self.k_lat,
            "layer2_kernel": self.layer2_kernel,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
        }
        for name, v in numeric_positive.items():
            if v <= 0:
                raise ValueError(f"{name} must be positive (got {v})")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if any(s % 2 == 0 for s in tuple(self.kernel_sizes) + (self.layer2_kernel,)):
            raise ValueError("convolution kernel sizes must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        d = self.__dict__.copy()
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "kernel_sizes" in d:
            d["kernel_sizes"] = tuple(d["kernel_sizes"])
        return cls(**d)


@dataclass
class ForwardTrace:
    """Attention weights and intermediate activations of one forward pass."""

    alpha_user: np.ndarray | None  # (B, m, p) word weights, user side
    alpha_item: np.ndarray | None  # (B, n, p)
    user_reviews: np.ndarray  # (B, m, k) review vectors
    item_reviews: np.ndarray  # (B, n, k)
    interaction: review_interaction.InteractionTrace | None
    d_user: np.ndarray  # (B, k)
    d_item: np.ndarray  # (B, k)
    predictions: np.ndarray  # (B,) raw, unclipped


class HTIModel:
    """Parameter tape plus the variant-aware forward pass."""

    def __init__(self, n_users, n_items, vocab_size, hyper: HyperParams, variant="full",
                 rng=None, embeddings=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        hyper.validate()
        self.hyper = hyper
        self.variant = variant
        self.n_users = n_users
        self.n_items = n_items
        self.vocab_size = vocab_size
        self.rng = rng if rng is not None else np.random.default_rng(hyper.seed)
        dtype = hyper.np_dtype()
        self.tape = ParamTape()
        word_encoder.init_word_encoder_params(
            self.tape, self.rng, vocab_size, hyper.embed_dim, hyper.k1, hyper.k_lat,
            dtype=dtype, kernel_sizes=hyper.kernel_sizes, layer2_kernel=hyper.layer2_kernel,
            embeddings=embeddings, with_attention=variant not in ("wavg", "wmax"),
        )
        if variant not in ("davg", "dmax"):
            review_interaction.init_interaction_params(self.tape, self.rng, hyper.k_lat, dtype=dtype)
        predictor.init_predictor_params(self.tape, self.rng, n_users, n_items, hyper.k_lat, dtype=dtype)

    def forward(self, batch, train=False, capture_trace=False, force_uniform_word_attention=False):
        """Raw predictions for an ExampleBatch; optionally a ForwardTrace."""
        tape, hyper = self.tape, self.hyper
        u_lat = nm.gather_rows(tape["latent.user"], batch.user_idx)
        v_lat = nm.gather_rows(tape["latent.item"], batch.item_idx)

        word_mode = {"wavg": "avg", "wmax": "max"}.get(self.variant, "attention")
        u_reviews, alpha_u = word_encoder.encode_review_grid(
            tape, batch.user_tokens, batch.user_token_mask, u_lat, v_lat,
            kernel_sizes=hyper.kernel_sizes, word_mode=word_mode,
            force_uniform_attention=force_uniform_word_attention,
        )
        v_reviews, alpha_v = word_encoder.encode_review_grid(
            tape, batch.item_tokens, batch.item_token_mask, u_lat, v_lat,
            kernel_sizes=hyper.kernel_sizes, word_mode=word_mode,
            force_uniform_attention=force_uniform_word_attention,
        )

        interaction_trace = None
        if self.variant in ("davg", "dmax"):
            d_user, d_item = review_interaction.pool_aggregate(
                u_reviews, v_reviews, batch.user_review_mask, batch.item_review_mask,
                "avg" if self.variant == "davg" else "max",
            )
        else:
            d_user, d_item, interaction_trace = review_interaction.aggregate(
                tape, u_reviews, v_reviews, batch.user_review_mask, batch.item_review_mask,
                capture_trace=capture_trace,
            )

        h0 = predictor.combine(u_lat, d_user, v_lat, d_item)
        preds = predictor.predict_mlp(
            tape, h0, train=train, dropout_rate=hyper.dropout, rng=self.rng,
        )
        trace = None
        if capture_trace:
            trace = ForwardTrace(
                alpha_user=None if alpha_u is None else alpha_u.data.copy(),
                alpha_item=None if alpha_v is None else alpha_v.data.copy(),
                user_reviews=u_reviews.data.copy(),
                item_reviews=v_reviews.data.copy(),
                interaction=interaction_trace,
                d_user=d_user.data.copy(),
                d_item=d_item.data.copy(),
                predictions=preds.data.copy(),
            )
        return preds, trace

    def loss(self, batch, train=True):
        preds, _ = self.forward(batch, train=train)
        return predictor.loss(preds, batch.ratings, self.tape, self.hyper.l2_lambda)

    def enforce_pad_row(self):
        self.tape["embed.W_e"].data[0] = 0.0

    # -- checkpoint container ---------------------------------------------

    def save_checkpoint(self, path, extra_meta=None):
        save_checkpoint(path, self.tape.state_dict(), self.hyper, self.variant,
                        self.n_users, self.n_items, self.vocab_size, extra_meta)

    @classmethod
    def load_checkpoint(cls, path):
        state, meta = load_checkpoint(path)
        hyper = HyperParams.from_dict(meta["hyper"])
        model = cls(meta["n_users"], meta["n_items"], meta["vocab_size"], hyper,
                    variant=meta["variant"])
        model.tape.load_state_dict(state)
        return model, meta


def save_checkpoint(path, state, hyper, variant, n_users, n_items, vocab_size, extra_meta=None):
    """Versioned binary container: JSON header + raw little-endian arrays.

    Byte-identical for identical inputs (no timestamps).
    """
    import json

    entries = []
    offset = 0
    blobs = []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hyper": hyper.to_dict(),
        "variant": variant,
        "n_users": n_users,
        "n_items": n_items,
        "vocab_size": vocab_size,
        "params": entries,
        "meta": extra_meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"HTICKPT1")
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    import json
    from collections import OrderedDict

    from .corpus import DataError

    try:
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != b"HTICKPT1":
                raise DataError(f"not a checkpoint file: {path}")
            hlen = int.from_bytes(f.read(8), "little")
            header = json.loads(f.read(hlen).decode("utf-8"))
            if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
            body = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    state = OrderedDict()
    for ent in header["params"]:
        raw = body[ent["offset"] : ent["offset"] + ent["nbytes"]]
        state[ent["name"]] = np.frombuffer(raw, dtype=ent["dtype"]).reshape(ent["shape"]).copy()
    return state, header
