"""Word-level review encoding: embeddings, two-layer CNN, pair attention.

One review becomes a single vector in three steps: embedding lookup, a
two-layer 1-D CNN (layer 1 runs kernel sizes 3 and 5 in parallel and
concatenates the maps, layer 2 maps the result to the latent width), and
an attention-weighted sum whose scores are parameterized by the user and
item latent factors, so the same review is summarized differently for
every pair.  Masked (pad) positions are forced to zero after every layer
so padding never leaks through convolution windows.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def load_pretrained_embeddings(path, vocabulary, dim, rng, dtype=np.float32):
    """Embedding matrix initialized from a ``token v1 ... vdim`` text file.

    Rows for tokens missing from the file are uniform(-0.05, 0.05); row 0
    (padding) is zero.
    """
    mat = rng.uniform(-0.05, 0.05, size=(len(vocabulary) + 1, dim)).astype(dtype)
    mat[0] = 0.0
    n_hit = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip().split()
            if len(parts) != dim + 1:
                continue
            token = parts[0]
            if token in vocabulary.token_to_id:
                mat[vocabulary.token_to_id[token]] = np.asarray(parts[1:], dtype=dtype)
                n_hit += 1
    return mat, n_hit


def init_word_encoder_params(tape, rng, vocab_size, embed_dim, k1, k_lat, dtype=np.float32,
                             kernel_sizes=(3, 5), layer2_kernel=5, embeddings=None,
                             with_attention=True):
    """Register encoder parameters on the tape.

    Layer-2 output width equals the latent dimension so review vectors can
    be added to latent factors downstream.  ``with_attention=False`` skips
    the pair-attention transform (pooling ablations never touch it).
    """
    if embeddings is None:
        embeddings = rng.uniform(-0.05, 0.05, size=(vocab_size + 1, embed_dim)).astype(dtype)
        embeddings[0] = 0.0
    tape.add("embed.W_e", embeddings)
    width1 = 0
    for s in kernel_sizes:
        tape.add(f"wenc.conv1_{s}.w", glorot_uniform(rng, (s, embed_dim, k1), s * embed_dim, s * k1, dtype))
        tape.add(f"wenc.conv1_{s}.b", np.zeros(k1, dtype=dtype))
        width1 += k1
    tape.add("wenc.conv2.w", glorot_uniform(rng, (layer2_kernel, width1, k_lat), layer2_kernel * width1,
                                            layer2_kernel * k_lat, dtype))
    tape.add("wenc.conv2.b", np.zeros(k_lat, dtype=dtype))
    if with_attention:
        tape.add("wenc.att.W", glorot_uniform(rng, (2 * k_lat, k_lat), 2 * k_lat, k_lat, dtype))
        tape.add("wenc.att.b", np.zeros(k_lat, dtype=dtype))


def encode_words(tape, token_ids, token_mask, kernel_sizes=(3, 5)):
    """High-level word vectors for padded reviews.

    token_ids: (..., p) int array; token_mask: same-shape bool.
    Returns a Tensor of shape (..., p, k_lat).
    """
    mask = token_mask[..., None].astype(tape["embed.W_e"].dtype)
    x = nm.gather_rows(tape["embed.W_e"], token_ids)
    x = nm.mul(x, mask)
    layer1 = [
        nm.conv1d_same(x, tape[f"wenc.conv1_{s}.w"], tape[f"wenc.conv1_{s}.b"], apply_relu=True)
        for s in kernel_sizes
    ]
    h = nm.mul(nm.concat(layer1, axis=-1), mask)
    h = nm.conv1d_same(h, tape["wenc.conv2.w"], tape["wenc.conv2.b"], apply_relu=True)
    return nm.mul(h, mask)


def pair_attention_query(tape, u_latent, v_latent):
    """Query vector m = tanh(W^T [u; v] + b), one per batch row."""
    uv = nm.concat([u_latent, v_latent], axis=-1)
    return nm.tanh(nm.add(nm.matmul(uv, tape["wenc.att.W"]), tape["wenc.att.b"]))


def attention_summarize(word_vectors, token_mask, query):
    """Attention-weighted sum of word vectors against a per-example query.

    word_vectors: (B, R, p, k); token_mask: (B, R, p); query: (B, k).
    Returns (reviews (B, R, k), alpha (B, R, p)).
    """
    b, _, _, k = word_vectors.shape
    q = nm.reshape(query, (b, 1, k, 1))
    scores = nm.reshape(nm.matmul(word_vectors, q), word_vectors.shape[:-1])
    alpha = nm.masked_softmax(scores, token_mask, axis=-1)
    reviews = nm.tsum(nm.mul(word_vectors, nm.reshape(alpha, alpha.shape + (1,))), axis=2)
    return reviews, alpha


def pool_summarize(word_vectors, token_mask, mode):
    """Review vectors by pooling over unmasked word vectors (ablations).

    ``mode="avg"`` runs a uniform-weight softmax through the same weighted
    sum as the attention path, so forcing uniform attention in the full
    model reproduces it bit for bit.  ``mode="max"`` takes a per-coordinate
    max over valid positions; a fully masked review yields the zero vector.
    """
    if mode == "avg":
        zeros = np.zeros(word_vectors.shape[:-1], dtype=word_vectors.dtype)
        alpha = nm.masked_softmax(Tensor(zeros), token_mask, axis=-1)
        reviews = nm.tsum(nm.mul(word_vectors, nm.reshape(alpha, alpha.shape + (1,))), axis=2)
        return reviews, alpha
    if mode == "max":
        valid = token_mask[..., None]
        reviews = nm.max_reduce(word_vectors, axis=2, valid=valid, empty_fill=0.0)
        return reviews, None
    raise ValueError(f"unknown pooling mode {mode!r}")


def encode_review_grid(tape, token_ids, token_mask, u_latent, v_latent,
                       kernel_sizes=(3, 5), word_mode="attention",
                       force_uniform_attention=False):
    """Encode a (B, R, p) review grid into (B, R, k) review vectors.

    Returns (reviews, alpha) where alpha is None for max pooling.
    """
    vecs = encode_words(tape, token_ids, token_mask, kernel_sizes)
    if word_mode == "attention":
        if force_uniform_attention:
            return pool_summarize(vecs, token_mask, "avg")
        query = pair_attention_query(tape, u_latent, v_latent)
        return attention_summarize(vecs, token_mask, query)
    return pool_summarize(vecs, token_mask, word_mode)
