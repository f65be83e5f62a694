"""A tiny differentiable vision-encoder / projector / autoregressive decoder.

The decoder is a single recurrent cell, attention-free, run over the
concatenated stream [projected visual tokens, instruction tokens, previous
answer tokens]. Its state has two parts:

* a fast-weight binding matrix ``M`` accumulated over the visual phase: for
  consecutive visual tokens it adds the outer product of their mean-centered,
  tanh-squashed key-side and value-side features, which stores key-glyph to
  value-glyph associations because facts are rendered as adjacent
  (key, value) cells (centering makes the many repeated blank cells cancel
  out; the squash keeps the memory bounded);
* a conventional tanh hidden vector ``h`` updated over the text phase.

At each answer position the cell forms a bounded query
q = tanh(x_prev Wqx + h Wq + bq) from the hidden state and the most recently
consumed token, reads r = tanh(q M) out of the binding memory, and emits
logits r C + h D + b. Everything is float64 numpy with hand-written
backprop, kept under 5000 parameters at the default sizes so that
finite-difference gradient checks stay cheap.

Source-language key/value token embeddings can be tied to the glyph
embeddings of the symbols they name (the images are written in the source
vocabulary). With tying on, questions in the image's own language start out
aligned with the visual features while the other language has to learn the
alignment from scratch, which is what makes the task genuinely cross-lingual
at this scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from .core import (
    ConfigurationError,
    GlyphImage,
    NoiseSpec,
    NumericalError,
    SequenceDistribution,
    StepDistribution,
    VisualTokens,
)
from .infotheory import noise_augment

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    glyph_vocab_size: int
    glyph_embed_dim: int = 10
    projector_dim: int = 10
    decoder_hidden_dim: int = 16
    binding_dim: int = 12
    max_answer_len: int = 1
    end_token: int = 0
    seed: int = 0
    #: (token id, glyph id) pairs whose embeddings share storage.
    tied_tokens: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for name in (
            "vocab_size", "glyph_vocab_size", "glyph_embed_dim",
            "projector_dim", "decoder_hidden_dim", "binding_dim",
        ):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_answer_len < 0:
            raise ConfigurationError("max_answer_len must be >= 0")
        object.__setattr__(
            self,
            "tied_tokens",
            tuple((int(t), int(g)) for t, g in self.tied_tokens),
        )
        for t, g in self.tied_tokens:
            if not 0 <= t < self.vocab_size:
                raise ConfigurationError(f"tied token {t} out of vocabulary")
            if not 0 <= g < self.glyph_vocab_size:
                raise ConfigurationError(f"tied glyph {g} out of glyph vocabulary")


def segment_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dp = config.glyph_embed_dim, config.projector_dim
    n, m, v = config.decoder_hidden_dim, config.binding_dim, config.vocab_size
    return {
        "glyph_embed": (config.glyph_vocab_size, d),
        "proj_w": (d, dp),
        "proj_b": (dp,),
        "tok_embed": (v, d),
        "bind_key": (dp, m),
        "bind_val": (dp, m),
        "rnn_wx": (d, n),
        "rnn_wh": (n, n),
        "rnn_b": (n,),
        "query_w": (n, m),
        "query_tok": (d, m),
        "query_b": (m,),
        "out_bind": (m, v),
        "out_hidden": (n, v),
        "out_b": (v,),
    }


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in segment_shapes(config).values())


@lru_cache(maxsize=32)
def _segment_offsets(config: ModelConfig) -> dict[str, tuple[int, int, tuple[int, ...]]]:
    offsets = {}
    pos = 0
    for name, shape in segment_shapes(config).items():
        size = int(np.prod(shape))
        offsets[name] = (pos, size, shape)
        pos += size
    return offsets


@lru_cache(maxsize=32)
def _token_routing(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (table, row): table 0 is tok_embed, table 1 is glyph_embed."""
    table = np.zeros(config.vocab_size, dtype=np.int64)
    row = np.arange(config.vocab_size, dtype=np.int64)
    for tok, glyph in config.tied_tokens:
        table[tok] = 1
        row[tok] = glyph
    table.setflags(write=False)
    row.setflags(write=False)
    return table, row


@dataclass
class ModelState:
    """Flat parameter vector with named segment views plus a step counter."""

    config: ModelConfig
    params: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = param_count(self.config)
        if self.params.shape != (expected,):
            raise ConfigurationError(
                f"parameter vector has shape {self.params.shape}, "
                f"expected ({expected},)"
            )
        if not np.isfinite(self.params).all():
            raise NumericalError("parameters contain non-finite values")

    def seg(self, name: str) -> np.ndarray:
        pos, size, shape = _segment_offsets(self.config)[name]
        return self.params[pos : pos + size].reshape(shape)

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.params.copy(), self.step)


def segment_of_index(config: ModelConfig, index: int) -> str:
    for name, (pos, size, _) in _segment_offsets(config).items():
        if pos <= index < pos + size:
            return name
    raise IndexError(index)


def init_state(config: ModelConfig) -> ModelState:
    """Seeded initialization.

    Glyph embeddings start at a healthy scale while free token embeddings
    start small: tied tokens therefore begin aligned with the visual features
    and untied ones have to earn their alignment during training.
    """
    rng = np.random.default_rng(config.seed)
    parts = []
    for name, shape in segment_shapes(config).items():
        if name == "glyph_embed":
            block = rng.normal(0.0, 0.5, size=shape)
        elif name in ("proj_w", "bind_key", "bind_val", "query_tok"):
            # Near-identity maps keep the glyph -> visual-feature -> query
            # chain aligned at initialization.
            block = np.eye(*shape) + rng.normal(0.0, 0.05, size=shape)
        elif name == "tok_embed":
            block = rng.normal(0.0, 0.1, size=shape)
        elif name == "rnn_wx":
            block = rng.normal(0.0, 0.5, size=shape)
        elif name == "rnn_wh":
            block = rng.normal(0.0, 0.4, size=shape)
        elif name in ("query_w", "out_bind", "out_hidden"):
            block = rng.normal(0.0, 0.05, size=shape)
        else:  # biases
            block = np.zeros(shape)
        parts.append(block.reshape(-1))
    return ModelState(config=config, params=np.concatenate(parts))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def encode_image(img: GlyphImage, state: ModelState) -> VisualTokens:
    """One glyph embedding per grid cell, row-major."""
    if img.glyph_vocab > state.config.glyph_vocab_size:
        raise ValueError(
            f"image glyph vocabulary {img.glyph_vocab} exceeds model's "
            f"{state.config.glyph_vocab_size}"
        )
    cells = img.cells_row_major()
    return VisualTokens(embeddings=state.seg("glyph_embed")[cells], noisy=False)


def project(v: VisualTokens, state: ModelState) -> VisualTokens:
    """Affine map of every visual embedding into the decoder's input space."""
    if v.dim != state.config.glyph_embed_dim:
        raise ConfigurationError(
            f"visual token dim {v.dim} does not match glyph_embed_dim "
            f"{state.config.glyph_embed_dim}"
        )
    out = v.embeddings @ state.seg("proj_w") + state.seg("proj_b")
    return VisualTokens(embeddings=out, noisy=v.noisy)


def visual_pipeline(
    img: GlyphImage, state: ModelState, noise: NoiseSpec | None = None
) -> VisualTokens:
    """encode -> optional Gaussian corruption -> project."""
    enc = encode_image(img, state)
    if noise is not None:
        enc = noise_augment(enc, noise)
    return project(enc, state)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    # The 1e-300 floor keeps extreme logit gaps from underflowing a
    # probability to exactly zero; it is far below every test tolerance.
    e = np.maximum(np.exp(shifted), 1e-300)
    return e / e.sum()


def _check_tokens(tokens, vocab_size: int, what: str) -> tuple[int, ...]:
    toks = tuple(int(t) for t in tokens)
    for t in toks:
        if not 0 <= t < vocab_size:
            raise ValueError(f"{what} token {t} out of vocabulary [0, {vocab_size})")
    return toks


def _token_vectors(state: ModelState, tokens: tuple[int, ...]) -> np.ndarray:
    table, row = _token_routing(state.config)
    tok_embed = state.seg("tok_embed")
    glyph_embed = state.seg("glyph_embed")
    if not tokens:
        return np.zeros((0, state.config.glyph_embed_dim))
    idx = np.fromiter(tokens, dtype=np.int64)
    vecs = np.empty((len(tokens), state.config.glyph_embed_dim))
    from_tok = table[idx] == 0
    vecs[from_tok] = tok_embed[row[idx[from_tok]]]
    vecs[~from_tok] = glyph_embed[row[idx[~from_tok]]]
    return vecs


def _run_decoder(
    state: ModelState,
    visual: np.ndarray,
    instruction: tuple[int, ...],
    targets: tuple[int, ...] | None,
    max_len: int,
    need_cache: bool,
):
    """Shared teacher-forced / greedy decode.

    Returns (probs (S, V), emitted tokens, cache). With ``targets`` given the
    emitted tokens are the targets; otherwise greedy argmax decoding runs
    until the end token or ``max_len``.
    """
    cfg = state.config
    wk, wv = state.seg("bind_key"), state.seg("bind_val")
    wx, wh, bh = state.seg("rnn_wx"), state.seg("rnn_wh"), state.seg("rnn_b")
    wq, wqx, bq = state.seg("query_w"), state.seg("query_tok"), state.seg("query_b")
    out_c, out_d, out_b = state.seg("out_bind"), state.seg("out_hidden"), state.seg("out_b")

    # Visual phase: fast-weight binding over consecutive projected tokens.
    # Features are mean-centered within the image so the many repeated blank
    # cells cancel out of the memory instead of dominating it, then squashed
    # so no parameter growth can compound through the bilinear readout; the
    # sum is scaled by sqrt(pairs) to keep magnitudes grid-size free.
    a_feat = np.tanh(visual @ wk - (visual @ wk).mean(axis=0))
    b_feat = np.tanh(visual @ wv - (visual @ wv).mean(axis=0))
    if visual.shape[0] >= 2:
        pair_scale = 1.0 / np.sqrt(visual.shape[0] - 1)
        memory = (a_feat[:-1].T @ b_feat[1:]) * pair_scale
    else:
        pair_scale = 0.0
        memory = np.zeros((cfg.binding_dim, cfg.binding_dim))

    # Text phase: consume the instruction, then previous answer tokens.
    consumed: list[int] = []
    states = [np.zeros(cfg.decoder_hidden_dim)]
    x_rows: list[np.ndarray] = []

    def consume(token: int):
        x = _token_vectors(state, (token,))[0]
        consumed.append(token)
        x_rows.append(x)
        states.append(np.tanh(x @ wx + states[-1] @ wh + bh))

    for tok in instruction:
        consume(tok)

    emit_states: list[int] = []
    queries: list[np.ndarray] = []
    reads: list[np.ndarray] = []
    probs_rows: list[np.ndarray] = []
    emitted: list[int] = []
    zero_x = np.zeros(cfg.glyph_embed_dim)

    def emit() -> np.ndarray:
        s = states[-1]
        # The most recently consumed token feeds the query directly; with the
        # key token last in the instruction this is the retrieval cue. Both
        # the query and the readout are tanh-bounded for stability.
        x_prev = x_rows[-1] if x_rows else zero_x
        q = np.tanh(x_prev @ wqx + s @ wq + bq)
        r = np.tanh(q @ memory)
        z = r @ out_c + s @ out_d + out_b
        p = _softmax(z)
        emit_states.append(len(states) - 1)
        queries.append(q)
        reads.append(r)
        probs_rows.append(p)
        return p

    if targets is not None:
        for i, tok in enumerate(targets):
            emit()
            emitted.append(tok)
            if i < len(targets) - 1:
                consume(tok)
    else:
        for _ in range(max_len):
            p = emit()
            tok = int(np.argmax(p))
            emitted.append(tok)
            if tok == cfg.end_token:
                break
            consume(tok)

    probs = (
        np.stack(probs_rows)
        if probs_rows
        else np.zeros((0, cfg.vocab_size))
    )
    cache = None
    if need_cache:
        cache = {
            "visual": visual,
            "a_feat": a_feat,
            "b_feat": b_feat,
            "pair_scale": pair_scale,
            "memory": memory,
            "consumed": tuple(consumed),
            "x": np.stack(x_rows) if x_rows else np.zeros((0, cfg.glyph_embed_dim)),
            "states": np.stack(states),
            "emit_states": tuple(emit_states),
            "queries": np.stack(queries) if queries else np.zeros((0, cfg.binding_dim)),
            "reads": np.stack(reads) if reads else np.zeros((0, cfg.binding_dim)),
            "probs": probs,
        }
    return probs, tuple(emitted), cache


def _as_sequence_distribution(probs: np.ndarray, tokens: tuple[int, ...]) -> SequenceDistribution:
    steps = tuple(StepDistribution(probs=row) for row in probs)
    return SequenceDistribution(steps=steps, realized_tokens=tokens)


def decode_distributions(
    visual: VisualTokens,
    question: tuple[int, ...],
    gold: tuple[int, ...],
    state: ModelState,
) -> SequenceDistribution:
    """Teacher-forced per-position distributions over the gold answer."""
    if visual.dim != state.config.projector_dim:
        raise ConfigurationError(
            f"decoder expects projected tokens of dim {state.config.projector_dim}, "
            f"got {visual.dim}"
        )
    question = _check_tokens(question, state.config.vocab_size, "question")
    gold = _check_tokens(gold, state.config.vocab_size, "gold")
    probs, _, _ = _run_decoder(
        state, visual.embeddings, question, gold, max_len=0, need_cache=False
    )
    return _as_sequence_distribution(probs, gold)


def generate(
    visual: VisualTokens,
    question: tuple[int, ...],
    state: ModelState,
    max_len: int | None = None,
) -> tuple[tuple[int, ...], SequenceDistribution]:
    """Greedy decode; stops at the end token or ``max_len`` steps."""
    if visual.dim != state.config.projector_dim:
        raise ConfigurationError(
            f"decoder expects projected tokens of dim {state.config.projector_dim}, "
            f"got {visual.dim}"
        )
    question = _check_tokens(question, state.config.vocab_size, "question")
    if max_len is None:
        max_len = state.config.max_answer_len
    probs, tokens, _ = _run_decoder(
        state, visual.embeddings, question, None, max_len=max_len, need_cache=False
    )
    return tokens, _as_sequence_distribution(probs, tokens)


def forward_cached(
    state: ModelState,
    image: GlyphImage,
    instruction: tuple[int, ...],
    targets: tuple[int, ...],
    noise: NoiseSpec | None = None,
):
    """Full-pipeline teacher-forced pass retaining intermediates for backprop.

    Returns (probs (S, V), cache). The cache additionally remembers the glyph
    cells so gradients reach the embedding table.
    """
    instruction = _check_tokens(instruction, state.config.vocab_size, "instruction")
    targets = _check_tokens(targets, state.config.vocab_size, "target")
    cells = image.cells_row_major()
    if cells.max(initial=0) >= state.config.glyph_vocab_size:
        raise ValueError("image glyph id out of model glyph vocabulary")
    enc = state.seg("glyph_embed")[cells]
    if noise is not None:
        rng = np.random.default_rng(noise.seed)
        enc = enc + rng.normal(noise.mean, noise.stddev, size=enc.shape)
    projected = enc @ state.seg("proj_w") + state.seg("proj_b")
    probs, _, cache = _run_decoder(
        state, projected, instruction, targets, max_len=0, need_cache=True
    )
    cache["cells"] = cells
    cache["enc"] = enc
    return probs, cache


def backward(state: ModelState, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of sum_i dlogits[i] . logits_i with respect to all parameters.

    ``dlogits`` carries the loss gradient at every emitted step, shape
    (steps, vocab). Raises :class:`NumericalError` naming the first offending
    segment if any gradient entry is non-finite.
    """
    cfg = state.config
    grad = np.zeros_like(state.params)
    gstate = ModelState(cfg, grad)  # reuse segment views; zero step
    g = gstate.seg

    wk, wv = state.seg("bind_key"), state.seg("bind_val")
    wx, wh = state.seg("rnn_wx"), state.seg("rnn_wh")
    wq, wqx = state.seg("query_w"), state.seg("query_tok")
    out_c, out_d = state.seg("out_bind"), state.seg("out_hidden")
    proj_w = state.seg("proj_w")

    table, row = _token_routing(cfg)
    consumed = cache["consumed"]
    x = cache["x"]

    def embedding_grad(token: int, dx: np.ndarray):
        if table[token] == 0:
            g("tok_embed")[row[token]] += dx
        else:
            g("glyph_embed")[row[token]] += dx

    states = cache["states"]
    dstates = np.zeros_like(states)
    dmemory = np.zeros_like(cache["memory"])

    for i, st_idx in enumerate(cache["emit_states"]):
        dz = dlogits[i]
        s = states[st_idx]
        q, r = cache["queries"][i], cache["reads"][i]
        g("out_b")[:] += dz
        g("out_bind")[:] += np.outer(r, dz)
        g("out_hidden")[:] += np.outer(s, dz)
        dr = (out_c @ dz) * (1.0 - r * r)
        dstates[st_idx] += out_d @ dz
        dq = (cache["memory"] @ dr) * (1.0 - q * q)
        dmemory += np.outer(q, dr)
        g("query_b")[:] += dq
        g("query_w")[:] += np.outer(s, dq)
        dstates[st_idx] += wq @ dq
        if st_idx > 0:
            x_prev = x[st_idx - 1]
            g("query_tok")[:] += np.outer(x_prev, dq)
            embedding_grad(consumed[st_idx - 1], wqx @ dq)

    # Backprop through time over the text phase.
    for k in range(len(consumed), 0, -1):
        ds = dstates[k]
        dpre = ds * (1.0 - states[k] * states[k])
        g("rnn_b")[:] += dpre
        g("rnn_wx")[:] += np.outer(x[k - 1], dpre)
        g("rnn_wh")[:] += np.outer(states[k - 1], dpre)
        dstates[k - 1] += wh @ dpre
        embedding_grad(consumed[k - 1], wx @ dpre)

    # Visual phase: binding memory, projector, glyph embeddings.
    visual = cache["visual"]
    a_feat, b_feat = cache["a_feat"], cache["b_feat"]
    if visual.shape[0] >= 2 and dmemory.any():
        dmemory = dmemory * cache["pair_scale"]
        da = np.zeros_like(a_feat)
        db = np.zeros_like(b_feat)
        da[:-1] = b_feat[1:] @ dmemory.T
        db[1:] = a_feat[:-1] @ dmemory
        da *= 1.0 - a_feat * a_feat
        db *= 1.0 - b_feat * b_feat
        # Centering is the projector X - mean(X); its Jacobian is symmetric.
        da -= da.mean(axis=0)
        db -= db.mean(axis=0)
        g("bind_key")[:] += visual.T @ da
        g("bind_val")[:] += visual.T @ db
        dvisual = da @ wk.T + db @ wv.T
        g("proj_w")[:] += cache["enc"].T @ dvisual
        g("proj_b")[:] += dvisual.sum(axis=0)
        denc = dvisual @ proj_w.T
        np.add.at(g("glyph_embed"), cache["cells"], denc)

    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericalError(
            f"non-finite gradient in parameter segment "
            f"'{segment_of_index(cfg, bad)}'"
        )
    return grad


# ---------------------------------------------------------------------------
# Checkpoints and defaults
# ---------------------------------------------------------------------------

def default_model_config(
    vocab_size: int,
    glyph_vocab_size: int,
    tied_tokens: tuple[tuple[int, int], ...] = (),
    seed: int = 0,
    **overrides,
) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        glyph_vocab_size=glyph_vocab_size,
        tied_tokens=tied_tokens,
        seed=seed,
        **overrides,
    )


def default_noise_spec(state: ModelState, seed: int = 0, multiplier: float = 5.0) -> NoiseSpec:
    """Zero-mean noise at ``multiplier`` times the embedding scale."""
    scale = float(np.std(state.seg("glyph_embed")))
    return NoiseSpec(mean=0.0, stddev=multiplier * scale, seed=seed)


def state_payload(state: ModelState) -> dict:
    cfg = asdict(state.config)
    cfg["tied_tokens"] = [list(p) for p in state.config.tied_tokens]
    return {
        "v": CHECKPOINT_VERSION,
        "config": cfg,
        "step": state.step,
        "segments": {
            name: state.seg(name).tolist() for name in segment_shapes(state.config)
        },
    }


def state_from_payload(payload: dict) -> ModelState:
    if payload.get("v") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {payload.get('v')!r}"
        )
    cfg_dict = dict(payload["config"])
    cfg_dict["tied_tokens"] = tuple(tuple(p) for p in cfg_dict["tied_tokens"])
    config = ModelConfig(**cfg_dict)
    parts = []
    for name, shape in segment_shapes(config).items():
        block = np.asarray(payload["segments"][name], dtype=np.float64)
        if block.shape != shape:
            raise ConfigurationError(
                f"segment {name} has shape {block.shape}, expected {shape}"
            )
        parts.append(block.reshape(-1))
    return ModelState(
        config=config, params=np.concatenate(parts), step=int(payload["step"])
    )


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_payload(state), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> ModelState:
    with open(path, "r", encoding="utf-8") as fh:
        return state_from_payload(json.load(fh))
