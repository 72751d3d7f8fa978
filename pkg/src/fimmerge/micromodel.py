"""A small decoder language model with exact hand-written gradients.

The model is a pre-norm decoder stack: token + learned position embeddings,
then per layer a single-head causal attention block and a SiLU-gated MLP
(so every layer owns a ``gate_proj`` tensor), RMS norms throughout, and an
untied LM head. Every nonlinearity is smooth, so the network is twice
differentiable everywhere -- a requirement for the curvature checks built
on top of it.

Parameters live in float64 for all computation (reductions need the
headroom against finite-difference oracles) but are generated on, and
exported to, the float32 grid of the archive format, so a write/load
round-trip is exact.

Parameter naming follows the common decoder convention understood by the
default ``NamingScheme``::

    model.embed_tokens.weight, model.embed_positions.weight,
    model.layers.{i}.self_attn.{q,k,v,o}_proj.weight,
    model.layers.{i}.mlp.{gate,up,down}_proj.weight,
    model.layers.{i}.input_layernorm.weight,
    model.layers.{i}.post_attention_layernorm.weight,
    model.norm.weight, lm_head.weight
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import TensorArchive
from .numerics import fd_hessian_from_grad

Params = dict[str, np.ndarray]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, nll: float):
        super().__init__(f"training diverged at step {step} (nll={nll})")
        self.step = step


@dataclass(frozen=True)
class MicroModelConfig:
    vocab_size: int = 64
    seq_len: int = 64
    n_layers: int = 4
    hidden_dim: int = 16
    mlp_hidden_dim: int = 64
    rms_norm_eps: float = 1e-6
    seed: int = 42

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MicroModelConfig":
        return MicroModelConfig(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "MicroModelConfig":
        return MicroModelConfig.from_json(Path(path).read_text())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _rmsnorm_fwd(x: np.ndarray, w: np.ndarray, eps: float):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * w, r


def _rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray, r: np.ndarray):
    d = x.shape[-1]
    dw = np.sum(dy * x * r, axis=(0, 1))
    inner = np.sum(dy * w * x, axis=-1, keepdims=True)
    dx = dy * w * r - x * inner * (r**3) / d
    return dx, dw


def _linear_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # flatten leading dims: one GEMM beats numpy's batched 3-D matmul here
    return (x.reshape(-1, x.shape[-1]) @ w.T).reshape(*x.shape[:-1], w.shape[0])


def _linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    o, i = w.shape
    dy2 = dy.reshape(-1, o)
    x2 = x.reshape(-1, i)
    dx = (dy2 @ w).reshape(x.shape)
    dw = dy2.T @ x2
    return dx, dw


@dataclass
class MicroModel:
    config: MicroModelConfig
    params: Params = field(repr=False, default_factory=dict)

    # -- construction ------------------------------------------------------

    @staticmethod
    def initialize(config: MicroModelConfig) -> "MicroModel":
        """Deterministic random init; values are snapped to the f32 grid."""
        rng = np.random.default_rng(config.seed)
        v, t, d, h = config.vocab_size, config.seq_len, config.hidden_dim, config.mlp_hidden_dim

        def draw(shape, scale):
            arr = rng.standard_normal(shape) * scale
            return arr.astype(np.float32).astype(np.float64)

        params: Params = {}
        params["model.embed_tokens.weight"] = draw((v, d), 0.5)
        params["model.embed_positions.weight"] = draw((t, d), 0.5)
        for i in range(config.n_layers):
            p = f"model.layers.{i}."
            for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
                params[p + f"self_attn.{proj}.weight"] = draw((d, d), d**-0.5)
            params[p + "mlp.gate_proj.weight"] = draw((h, d), d**-0.5)
            params[p + "mlp.up_proj.weight"] = draw((h, d), d**-0.5)
            params[p + "mlp.down_proj.weight"] = draw((d, h), h**-0.5)
            params[p + "input_layernorm.weight"] = np.ones(d, dtype=np.float64)
            params[p + "post_attention_layernorm.weight"] = np.ones(d, dtype=np.float64)
        params["model.norm.weight"] = np.ones(d, dtype=np.float64)
        params["lm_head.weight"] = draw((v, d), d**-0.5)
        return MicroModel(config=config, params=params)

    @staticmethod
    def from_archive(config: MicroModelConfig, archive: TensorArchive) -> "MicroModel":
        params = {name: arr.astype(np.float64) for name, arr in archive.items()}
        return MicroModel(config=config, params=params)

    def to_archive(self) -> TensorArchive:
        return TensorArchive({n: a.astype(np.float32) for n, a in self.params.items()})

    def save(self, archive_path: str | Path) -> None:
        """Write the checkpoint archive with its config JSON next to it."""
        from .archive import write_archive

        archive_path = Path(archive_path)
        write_archive(self.to_archive(), archive_path)
        self.config.save(config_path_for(archive_path))

    @staticmethod
    def load(archive_path: str | Path) -> "MicroModel":
        from .archive import load_archive

        archive_path = Path(archive_path)
        config = MicroModelConfig.load(config_path_for(archive_path))
        return MicroModel.from_archive(config, load_archive(archive_path))

    # -- parameter vector view --------------------------------------------

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def flatten(self) -> np.ndarray:
        return flatten_params(self.params)

    def with_params(self, params: Params) -> "MicroModel":
        return MicroModel(config=self.config, params=params)

    def with_flat(self, theta: np.ndarray) -> "MicroModel":
        return self.with_params(unflatten_params(self.params, theta))

    def shifted(self, delta: Params | TensorArchive, scale: float = 1.0) -> "MicroModel":
        """Model at ``params + scale * delta``; missing names shift by zero."""
        entries = delta.entries if isinstance(delta, TensorArchive) else delta
        params = {
            n: a + scale * np.asarray(entries[n], dtype=np.float64) if n in entries else a.copy()
            for n, a in self.params.items()
        }
        return self.with_params(params)

    # -- forward / backward ------------------------------------------------

    def _validate_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ValueError("tokens must be a sequence or a batch of sequences")
        if tokens.shape[1] < 2:
            raise ValueError("sequences need at least 2 tokens for next-token loss")
        if tokens.shape[1] > self.config.seq_len:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds model maximum {self.config.seq_len}"
            )
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    def _forward(self, tokens: np.ndarray):
        """Run the stack, keeping every intermediate needed for backward."""
        p = self.params
        cfg = self.config
        b, t = tokens.shape
        scale = cfg.hidden_dim**-0.5
        mask = np.triu(np.full((t, t), -np.inf), k=1)

        x = p["model.embed_tokens.weight"][tokens] + p["model.embed_positions.weight"][:t]
        caches = []
        for i in range(cfg.n_layers):
            pre = f"model.layers.{i}."
            w_in = p[pre + "input_layernorm.weight"]
            a, r_in = _rmsnorm_fwd(x, w_in, cfg.rms_norm_eps)
            q = _linear_fwd(a, p[pre + "self_attn.q_proj.weight"])
            k = _linear_fwd(a, p[pre + "self_attn.k_proj.weight"])
            v = _linear_fwd(a, p[pre + "self_attn.v_proj.weight"])
            scores = q @ k.transpose(0, 2, 1) * scale + mask
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            ctx = attn @ v
            x_mid = x + _linear_fwd(ctx, p[pre + "self_attn.o_proj.weight"])

            w_post = p[pre + "post_attention_layernorm.weight"]
            bn, r_post = _rmsnorm_fwd(x_mid, w_post, cfg.rms_norm_eps)
            g = _linear_fwd(bn, p[pre + "mlp.gate_proj.weight"])
            u = _linear_fwd(bn, p[pre + "mlp.up_proj.weight"])
            sig = _sigmoid(g)
            m = g * sig * u
            x_out = x_mid + _linear_fwd(m, p[pre + "mlp.down_proj.weight"])

            caches.append(
                dict(x=x, a=a, r_in=r_in, q=q, k=k, v=v, attn=attn, ctx=ctx,
                     x_mid=x_mid, bn=bn, r_post=r_post, g=g, u=u, sig=sig, m=m)
            )
            x = x_out

        y, r_final = _rmsnorm_fwd(x, p["model.norm.weight"], cfg.rms_norm_eps)
        logits = _linear_fwd(y, p["lm_head.weight"])
        return logits, dict(tokens=tokens, x_final=x, y=y, r_final=r_final, caches=caches)

    def _backward(self, state: dict, dlogits: np.ndarray) -> Params:
        p = self.params
        cfg = self.config
        tokens = state["tokens"]
        b, t = tokens.shape
        scale = cfg.hidden_dim**-0.5
        grads: Params = {n: np.zeros_like(a) for n, a in p.items()}

        dy, grads["lm_head.weight"] = _linear_bwd(dlogits, state["y"], p["lm_head.weight"])
        dx, grads["model.norm.weight"] = _rmsnorm_bwd(
            dy, state["x_final"], p["model.norm.weight"], state["r_final"]
        )

        for i in reversed(range(cfg.n_layers)):
            pre = f"model.layers.{i}."
            c = state["caches"][i]

            # MLP branch: x_out = x_mid + down(silu(gate(bn)) * up(bn))
            dm, grads[pre + "mlp.down_proj.weight"] = _linear_bwd(
                dx, c["m"], p[pre + "mlp.down_proj.weight"]
            )
            sig = c["sig"]
            dg = dm * c["u"] * (sig * (1.0 + c["g"] * (1.0 - sig)))
            du = dm * (c["g"] * sig)
            dbn_g, grads[pre + "mlp.gate_proj.weight"] = _linear_bwd(
                dg, c["bn"], p[pre + "mlp.gate_proj.weight"]
            )
            dbn_u, grads[pre + "mlp.up_proj.weight"] = _linear_bwd(
                du, c["bn"], p[pre + "mlp.up_proj.weight"]
            )
            dx_mid_norm, grads[pre + "post_attention_layernorm.weight"] = _rmsnorm_bwd(
                dbn_g + dbn_u, c["x_mid"], p[pre + "post_attention_layernorm.weight"], c["r_post"]
            )
            dx_mid = dx + dx_mid_norm

            # attention branch: x_mid = x + o(attn @ v)
            dctx, grads[pre + "self_attn.o_proj.weight"] = _linear_bwd(
                dx_mid, c["ctx"], p[pre + "self_attn.o_proj.weight"]
            )
            dattn = dctx @ c["v"].transpose(0, 2, 1)
            dv = c["attn"].transpose(0, 2, 1) @ dctx
            dscores = c["attn"] * (dattn - np.sum(dattn * c["attn"], axis=-1, keepdims=True))
            dq = dscores @ c["k"] * scale
            dk = dscores.transpose(0, 2, 1) @ c["q"] * scale
            da_q, grads[pre + "self_attn.q_proj.weight"] = _linear_bwd(
                dq, c["a"], p[pre + "self_attn.q_proj.weight"]
            )
            da_k, grads[pre + "self_attn.k_proj.weight"] = _linear_bwd(
                dk, c["a"], p[pre + "self_attn.k_proj.weight"]
            )
            da_v, grads[pre + "self_attn.v_proj.weight"] = _linear_bwd(
                dv, c["a"], p[pre + "self_attn.v_proj.weight"]
            )
            dx_norm, grads[pre + "input_layernorm.weight"] = _rmsnorm_bwd(
                da_q + da_k + da_v, c["x"], p[pre + "input_layernorm.weight"], c["r_in"]
            )
            dx = dx_mid + dx_norm

        np.add.at(
            grads["model.embed_tokens.weight"],
            tokens.reshape(-1),
            dx.reshape(-1, cfg.hidden_dim),
        )
        grads["model.embed_positions.weight"][:t] = dx.sum(axis=0)
        return grads

    @staticmethod
    def _log_softmax(logits: np.ndarray) -> np.ndarray:
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def _nll_pieces(self, tokens: np.ndarray):
        """Per-sequence mean next-token NLL plus the state for backward."""
        tokens = self._validate_tokens(tokens)
        logits, state = self._forward(tokens)
        logp = self._log_softmax(logits[:, :-1, :])
        targets = tokens[:, 1:]
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        per_seq = -picked.mean(axis=-1)
        state["softmax"] = np.exp(logp)
        state["targets"] = targets
        return per_seq, state

    def _nll_backward(self, state: dict, seq_weights: np.ndarray) -> Params:
        """Gradient of sum_b seq_weights[b] * mean-NLL_b."""
        tokens = state["tokens"]
        b, t = tokens.shape
        probs = state["softmax"]
        dlogits = np.zeros((b, t, self.config.vocab_size), dtype=np.float64)
        dpred = probs.copy()
        rows = np.broadcast_to(np.arange(t - 1), (b, t - 1))
        cols = np.broadcast_to(np.arange(b)[:, None], (b, t - 1))
        dpred[cols, rows, state["targets"]] -= 1.0
        dlogits[:, :-1, :] = dpred * (seq_weights[:, None, None] / (t - 1))
        return self._backward(state, dlogits)

    def forward_nll(self, tokens) -> float:
        """Mean next-token negative log-likelihood in nats.

        For a batch, the mean over sequences of per-sequence means.
        """
        per_seq, _ = self._nll_pieces(tokens)
        return float(per_seq.mean())

    def backward_nll(self, tokens) -> Params:
        """Exact gradient of ``forward_nll`` for every parameter."""
        per_seq, state = self._nll_pieces(tokens)
        b = per_seq.shape[0]
        return self._nll_backward(state, np.full(b, 1.0 / b))

    def nll_and_grad(self, tokens) -> tuple[float, Params]:
        per_seq, state = self._nll_pieces(tokens)
        b = per_seq.shape[0]
        return float(per_seq.mean()), self._nll_backward(state, np.full(b, 1.0 / b))

    def log_prob_outputs(self, tokens) -> np.ndarray:
        """Next-token log-probability array, shape (batch, T-1, vocab).

        This is the vector-valued model output used by the nonlinearity
        analysis; flattening it gives f(theta) as a Euclidean vector.
        """
        tokens = self._validate_tokens(tokens)
        logits, _ = self._forward(tokens)
        return self._log_softmax(logits[:, :-1, :])

    def scalar_output(self, probes) -> float:
        """Mean log-probability of the probe continuations (= -mean NLL)."""
        probes = np.asarray(probes)
        if probes.size == 0:
            raise ValueError("probes must be nonempty")
        return -self.forward_nll(probes)

    def scalar_output_grad(self, probes) -> Params:
        grads = self.backward_nll(probes)
        return {n: -g for n, g in grads.items()}

    def finite_difference_hessian(self, probes, subset, h: float = 1e-4) -> np.ndarray:
        """Dense symmetric Hessian of ``scalar_output`` over flat-coordinate
        ``subset``, from central differences of the analytic gradient."""
        subset = np.asarray(subset, dtype=np.int64)
        if len(subset) > 2000:
            raise ValueError("Hessian subset limited to 2000 coordinates")
        n = self.num_params()
        if len(subset) and (subset.min() < 0 or subset.max() >= n):
            raise ValueError(f"subset coordinate out of range [0, {n})")
        theta0 = self.flatten()

        def grad_fn(theta: np.ndarray) -> np.ndarray:
            return flatten_params(self.with_flat(theta).scalar_output_grad(probes))

        return fd_hessian_from_grad(grad_fn, theta0, subset, h=h)


# -- flat parameter vector helpers ------------------------------------------


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n in sorted(params)])


def unflatten_params(template: Params, theta: np.ndarray) -> Params:
    total = sum(a.size for a in template.values())
    if theta.size != total:
        raise ValueError(f"flat vector length {theta.size} != parameter count {total}")
    out: Params = {}
    cursor = 0
    for name in sorted(template):
        size = template[name].size
        out[name] = np.asarray(
            theta[cursor : cursor + size], dtype=np.float64
        ).reshape(template[name].shape)
        cursor += size
    return out


def config_path_for(archive_path: str | Path) -> Path:
    return Path(str(archive_path) + ".config.json")


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: MicroModel
    steps: int
    final_nll: float
    final_grad_norm: float
    nll_history: list[float] = field(repr=False, default_factory=list)


def train_to_convergence(model: MicroModel, corpus, steps: int = 2000,
                         lr: float = 0.5, log_every: int = 0) -> TrainResult:
    """Plain full-batch gradient descent on mean corpus NLL, fixed step size.

    Deterministic given the model and corpus. Raises TrainingDiverged when
    the loss stops being finite.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("corpus must be nonempty")
    params = {n: a.copy() for n, a in model.params.items()}
    current = model.with_params(params)
    history: list[float] = []
    nll, grads = current.nll_and_grad(corpus)
    for step in range(steps):
        if not np.isfinite(nll):
            raise TrainingDiverged(step, nll)
        history.append(nll)
        params = {n: params[n] - lr * grads[n] for n in params}
        current = current.with_params(params)
        nll, grads = current.nll_and_grad(corpus)
        if log_every and step % log_every == 0:
            print(f"step {step}: nll={nll:.6f}")
    if not np.isfinite(nll):
        raise TrainingDiverged(steps, nll)
    history.append(nll)
    grad_norm = float(np.linalg.norm(flatten_params(grads)))
    return TrainResult(model=current, steps=steps, final_nll=nll,
                       final_grad_norm=grad_norm, nll_history=history)


# -- synthetic data ------------------------------------------------------------


def sample_uniform_tokens(vocab_size: int, n: int, seq_len: int, seed: int) -> np.ndarray:
    """I.i.d. uniform token sequences; the shared sampling rule for the
    data-free Fisher estimate (both implementations must reproduce it)."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n, seq_len), dtype=np.int64)


def make_markov_corpus(vocab_size: int, n: int, seq_len: int, seed: int,
                       mult: int = 3, offset: int = 1, noise: float = 0.3) -> np.ndarray:
    """Noisy affine-map Markov sequences for fine-tuning experiments."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab_size, size=n)
    for t in range(1, seq_len):
        follow = (out[:, t - 1] * mult + offset) % vocab_size
        random = rng.integers(0, vocab_size, size=n)
        pick = rng.random(n) < noise
        out[:, t] = np.where(pick, random, follow)
    return out


def make_fisher_corpus(effective_vocab: int = 8, n: int = 64, seed: int = 43,
                       noise: float = 0.35, mult: int = 3, offset: int = 1) -> np.ndarray:
    """Token pairs whose contexts repeat with stochastic continuations.

    Every context appears many times with genuinely random next tokens, so
    the NLL optimum is interior (probabilities match empirical conditional
    frequencies, never saturating at 0/1). This is the regime where the
    squared-gradient/Hessian-diagonal equivalence actually holds; on a
    memorizable corpus the two quantities drift apart in scale as the
    model's probabilities saturate.
    """
    rng = np.random.default_rng(seed)
    x0 = rng.integers(0, effective_vocab, size=n)
    follow = (x0 * mult + offset) % effective_vocab
    rand = rng.integers(0, effective_vocab, size=n)
    x1 = np.where(rng.random(n) < noise, rand, follow)
    return np.stack([x0, x1], axis=1)


@dataclass
class MicroPair:
    """A base/tuned checkpoint pair fine-tuned apart on two corpora."""

    base: MicroModel
    tuned: MicroModel
    corpus_base: np.ndarray
    corpus_tuned: np.ndarray
    base_result: TrainResult
    tuned_result: TrainResult


def make_micro_pair(config: MicroModelConfig | None = None, n_sequences: int = 12,
                    train_seq_len: int = 24, base_steps: int = 600,
                    tune_steps: int = 400, lr: float = 0.5, seed: int = 42) -> MicroPair:
    """Train a base model on one synthetic corpus, then fine-tune a copy on
    a second corpus with different transition structure."""
    config = config or MicroModelConfig(seed=seed)
    train_seq_len = min(train_seq_len, config.seq_len)
    corpus_a = make_markov_corpus(config.vocab_size, n_sequences, train_seq_len,
                                  seed=seed + 1, mult=3, offset=1, noise=0.3)
    corpus_b = make_markov_corpus(config.vocab_size, n_sequences, train_seq_len,
                                  seed=seed + 2, mult=5, offset=7, noise=0.15)
    init = MicroModel.initialize(config)
    base_result = train_to_convergence(init, corpus_a, steps=base_steps, lr=lr)
    tuned_result = train_to_convergence(base_result.model, corpus_b, steps=tune_steps, lr=lr)
    return MicroPair(
        base=base_result.model,
        tuned=tuned_result.model,
        corpus_base=corpus_a,
        corpus_tuned=corpus_b,
        base_result=base_result,
        tuned_result=tuned_result,
    )
