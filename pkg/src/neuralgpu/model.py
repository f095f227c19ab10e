"""The Neural GPU: a stack of convolutional GRUs unrolled once per input symbol.

A length-``n`` symbol string is embedded into row 0 of an ``[n, width,
filters]`` mental image (row 1 also carries the second operand in the aligned
representation). Each of the ``n`` timesteps applies ``layers`` CGRU layers
using parameter set ``t mod param_sets``; the final image's row 0 is mapped to
symbol logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tasks import ALPHABET_SIZE
from .tensor import Tensor

LAYER_KEYS = ("U", "R", "W", "bU", "bR", "b")
REPRESENTATIONS = ("padded", "unpadded", "aligned")


@dataclass
class ModelConfig:
    alphabet_size: int = ALPHABET_SIZE
    filters: int = 24
    width: int = 4
    layers: int = 2
    kernel: tuple[int, int] = (3, 3)
    param_sets: int = 6
    cutoff: bool = True
    dropout: float = 0.1
    max_length: int = 4096

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        for key in ("filters", "width", "layers", "param_sets", "alphabet_size", "max_length"):
            if int(getattr(self, key)) < 1:
                raise ContractViolation(f"ModelConfig.{key} must be >= 1")
        if len(self.kernel) != 2 or any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ContractViolation(f"kernel extents must be odd and positive, got {self.kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d


class LayerParams(NamedTuple):
    U: Tensor
    R: Tensor
    W: Tensor
    bU: Tensor
    bR: Tensor
    b: Tensor


def _pname(c: int, layer: int, key: str) -> str:
    return f"set{c}.layer{layer}.{key}"


class ParameterBank:
    """``param_sets`` copies of every layer's kernels and biases, plus the
    shared embedding and output map.

    After :func:`collapse_param_sets` every set refers to the *same* tensor
    objects, so further training keeps them identical.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], collapsed: bool = False):
        self.config = config
        self.tensors = tensors
        self.collapsed = collapsed

    @classmethod
    def initialize(cls, config: ModelConfig, seed, dtype=np.float32) -> "ParameterBank":
        rng = np.random.default_rng(seed)
        m, a = config.filters, config.alphabet_size
        kh, kw = config.kernel
        bound = float(np.sqrt(3.0 / (kh * kw * m)))
        tensors: dict[str, Tensor] = {}
        for c in range(config.param_sets):
            for layer in range(config.layers):
                for key in ("U", "R", "W"):
                    tensors[_pname(c, layer, key)] = rng.uniform(-bound, bound, (kh, kw, m, m))
                # Gates start open-ish so the state is carried through depth.
                tensors[_pname(c, layer, "bU")] = np.full(m, 1.0)
                tensors[_pname(c, layer, "bR")] = np.full(m, 1.0)
                tensors[_pname(c, layer, "b")] = np.zeros(m)
        tensors["embed"] = rng.uniform(-1.0, 1.0, (a, m))
        tensors["output"] = rng.uniform(-np.sqrt(3.0 / m), np.sqrt(3.0 / m), (m, a))
        return cls(config, {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)
                            for k, v in tensors.items()})

    @property
    def embed(self) -> Tensor:
        return self.tensors["embed"]

    @property
    def output(self) -> Tensor:
        return self.tensors["output"]

    @property
    def dtype(self):
        return self.embed.dtype

    def layer(self, set_index: int, layer: int) -> LayerParams:
        return LayerParams(*(self.tensors[_pname(set_index, layer, k)] for k in LAYER_KEYS))

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Distinct trainable tensors, each under its first name."""
        seen: set[int] = set()
        out = []
        for name, t in self.tensors.items():
            if id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], collapsed: bool = False,
                    dtype=None) -> "ParameterBank":
        tensors = {k: Tensor(np.array(v, dtype=dtype or v.dtype), requires_grad=True, name=k)
                   for k, v in arrays.items()}
        bank = cls(config, tensors, collapsed=False)
        _check_bank(bank)
        if collapsed:
            bank._alias_sets()
        return bank

    def copy(self, dtype=None) -> "ParameterBank":
        return ParameterBank.from_arrays(self.config, self.state_arrays(), self.collapsed, dtype=dtype)

    def _alias_sets(self) -> None:
        for layer in range(self.config.layers):
            for key in LAYER_KEYS:
                shared = self.tensors[_pname(0, layer, key)]
                for c in range(1, self.config.param_sets):
                    self.tensors[_pname(c, layer, key)] = shared
        self.collapsed = True


def _check_bank(bank: ParameterBank) -> None:
    cfg = bank.config
    m, a = cfg.filters, cfg.alphabet_size
    kh, kw = cfg.kernel
    expected = {"embed": (a, m), "output": (m, a)}
    for c in range(cfg.param_sets):
        for layer in range(cfg.layers):
            for key in ("U", "R", "W"):
                expected[_pname(c, layer, key)] = (kh, kw, m, m)
            for key in ("bU", "bR", "b"):
                expected[_pname(c, layer, key)] = (m,)
    if set(expected) != set(bank.tensors):
        missing = sorted(set(expected) - set(bank.tensors))
        extra = sorted(set(bank.tensors) - set(expected))
        raise ContractViolation(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
    for k, shape in expected.items():
        if bank.tensors[k].shape != shape:
            raise ContractViolation(f"parameter {k} has shape {bank.tensors[k].shape}, config expects {shape}")


@dataclass
class ForwardTrace:
    """Instrumentation filled in by :func:`forward`."""

    set_indices: list[int] = field(default_factory=list)
    layer_applications: int = 0


def embed(symbols, bank: ParameterBank, representation: str = "padded", second_row_symbols=None) -> Tensor:
    """Build the initial mental image ``[(b,) n, width, filters]``."""
    if representation not in REPRESENTATIONS:
        raise ContractViolation(f"unknown representation {representation!r}")
    if (second_row_symbols is not None) != (representation == "aligned"):
        raise ContractViolation("second_row_symbols must be given exactly when representation is 'aligned'")
    symbols = np.asarray(symbols, dtype=np.int64)
    a = bank.config.alphabet_size
    if symbols.size and (symbols.min() < 0 or symbols.max() >= a):
        raise ContractViolation(f"symbol index outside alphabet of size {a}")
    index = np.full(symbols.shape + (bank.config.width,), -1, dtype=np.int64)
    index[..., 0] = symbols
    if second_row_symbols is not None:
        second = np.asarray(second_row_symbols, dtype=np.int64)
        if second.shape != symbols.shape:
            raise ContractViolation("aligned rows must have equal length")
        if second.size and (second.min() < 0 or second.max() >= a):
            raise ContractViolation(f"symbol index outside alphabet of size {a}")
        if bank.config.width < 2:
            raise ContractViolation("aligned representation needs width >= 2")
        index[..., 1] = second
    return T.embed_rows(bank.embed, index)


def cgru_layer(s: Tensor, params: LayerParams, cutoff: bool = True, dropout_mask: np.ndarray | None = None) -> Tensor:
    gate = T.saturating_sigmoid if cutoff else T.sigmoid
    act = T.saturating_tanh if cutoff else T.tanh
    cols = T.patches(s, *params.U.shape[:2])  # shared by the two gate convolutions
    u = gate(T.conv2d(s, params.U, params.bU, cols))
    r = gate(T.conv2d(s, params.R, params.bR, cols))
    c = act(T.conv2d(r * s, params.W, params.b))
    if dropout_mask is not None:
        c = T.apply_mask(c, dropout_mask)
    return u * s + (1.0 - u) * c


def forward(symbols, bank: ParameterBank, mode: str = "eval", *, second_row=None,
            dropout_seed=None, memory: str = "stored", trace: ForwardTrace | None = None,
            set_order: Sequence[int] | None = None) -> Tensor:
    """Logits ``[(b,) n, alphabet_size]`` for a symbol array ``[(b,) n]``.

    ``set_order`` overrides the timestep-to-parameter-set assignment (entry
    ``t mod len(set_order)`` is used at timestep ``t``); by default timestep
    ``t`` uses set ``t mod param_sets``.
    """
    cfg = bank.config
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    if memory not in ("stored", "recompute"):
        raise ContractViolation(f"memory mode must be 'stored' or 'recompute', got {memory!r}")
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim not in (1, 2):
        raise ContractViolation("symbols must be [n] or [batch, n]")
    n = symbols.shape[-1]
    if n == 0:
        raise ContractViolation("cannot run the model on an empty input")
    if n > cfg.max_length:
        raise ContractViolation(f"input length {n} exceeds configured maximum {cfg.max_length}")
    representation = "aligned" if second_row is not None else "padded"
    s = embed(symbols, bank, representation, second_row)

    masks: list = [None] * cfg.layers
    if mode == "train" and cfg.dropout > 0.0:
        if dropout_seed is None:
            raise ContractViolation("train mode with dropout needs a dropout_seed")
        for layer in range(cfg.layers):
            masks[layer] = T.dropout_mask(s.shape, cfg.dropout, [*np.atleast_1d(dropout_seed), layer], s.dtype)

    order = list(set_order) if set_order is not None else list(range(cfg.param_sets))
    for t in range(n):
        c = order[t % len(order)]
        layer_params = [bank.layer(c, layer) for layer in range(cfg.layers)]

        def step(x, layer_params=layer_params):
            for layer, p in enumerate(layer_params):
                x = cgru_layer(x, p, cfg.cutoff, masks[layer])
            return x

        s = T.checkpoint(step, s) if memory == "recompute" else step(s)
        if trace is not None:
            trace.set_indices.append(c)
            trace.layer_applications += cfg.layers
    return T.linear(T.take_row(s, 0), bank.output)


def decode(logits) -> np.ndarray:
    """Per-position argmax; ties go to the lowest symbol index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(data).all():
        raise ContractViolation("cannot decode non-finite logits")
    return np.argmax(data, axis=-1)


def _set_groups(bank: ParameterBank) -> list[list[Tensor]]:
    cfg = bank.config
    return [[bank.tensors[_pname(c, layer, key)] for c in range(cfg.param_sets)]
            for layer in range(cfg.layers) for key in LAYER_KEYS]


def relaxation_penalty(bank: ParameterBank) -> Tensor:
    """Sum over layers and sets of squared distance to the across-set mean."""
    if bank.config.param_sets == 1 or bank.collapsed:
        return Tensor(np.zeros((), dtype=bank.dtype))
    total = None
    for group in _set_groups(bank):
        term = T.pull_to_mean(group)
        total = term if total is None else total + term
    return total


def collapse_param_sets(bank: ParameterBank) -> ParameterBank:
    """Return a bank whose sets all alias one tensor holding the mean."""
    cfg = bank.config
    tensors = dict(bank.tensors)
    for layer in range(cfg.layers):
        for key in LAYER_KEYS:
            group = [bank.tensors[_pname(c, layer, key)].data for c in range(cfg.param_sets)]
            mean = np.mean(np.stack(group).astype(np.longdouble), axis=0).astype(group[0].dtype)
            shared = Tensor(mean, requires_grad=True, name=_pname(0, layer, key))
            for c in range(cfg.param_sets):
                tensors[_pname(c, layer, key)] = shared
    return ParameterBank(cfg, tensors, collapsed=True)
