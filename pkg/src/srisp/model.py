"""Trainable state: parameter dictionaries, image encoders, and the
reference-guided weight-estimation head stack."""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

# encoder layouts: (in_channels, out_channels) per 3x3 stride-2 layer,
# ReLU after every layer but the last, then global average pooling
MAIN_ENCODER_CHANNELS = [(3, 32), (32, 64), (64, 128), (128, 128), (128, 128)]
BLOCK_ENCODER_WIDTH = 32
TM_CHANNELS = 32
TM_LAYER_DIMS = [(3, TM_CHANNELS), (TM_CHANNELS, TM_CHANNELS), (TM_CHANNELS, TM_CHANNELS), (TM_CHANNELS, 3)]

SCALAR_BLOCKS = ("gain", "wb", "ccm", "gamma")
TM_HEADS = tuple(f"tm.{d}.l{i}" for d in ("rev", "fwd") for i in range(4))
ALL_HEADS = SCALAR_BLOCKS + TM_HEADS

FEATURE_DIM = 128
BLOCK_FEATURE_DIM = 32


@dataclass
class ModelConfig:
    dict_size: int = 5
    select_size: int = 256
    use_dtm: bool = True

    def to_dict(self):
        return {"dict_size": self.dict_size, "select_size": self.select_size, "use_dtm": self.use_dtm}

    @staticmethod
    def from_dict(d):
        return ModelConfig(**d)


def load_builtin_ccm_pool():
    """The versioned pool of plausible 3x3 camera color matrices."""
    text = importlib.resources.files("srisp.data").joinpath("ccm_pool.json").read_text()
    return parse_ccm_pool(json.loads(text))


def parse_ccm_pool(doc):
    if isinstance(doc, dict):
        entries = doc["matrices"]
    else:
        entries = doc
    pool = []
    for e in entries:
        m = np.asarray(e["ccm"], dtype=np.float64).reshape(3, 3)
        m = m / m.sum(axis=0, keepdims=True)
        if abs(np.linalg.det(m)) <= 1e-8:
            raise ValueError(f"singular CCM in pool: {e.get('name')}")
        pool.append((e.get("name", "unnamed"), m.astype(np.float32)))
    if not pool:
        raise ValueError("empty CCM pool")
    return pool


def _uniform_init(rng, shape, fan_in):
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float32)


def _conv_stack_params(rng, name, dims, params):
    for i, (ci, co) in enumerate(dims):
        fan_in = 9 * ci
        params[f"{name}.l{i}.kernel"] = Tensor(_uniform_init(rng, (3, 3, ci, co), fan_in), requires_grad=True)
        params[f"{name}.l{i}.bias"] = Tensor(np.zeros(co, dtype=np.float32), requires_grad=True)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @staticmethod
    def build(config: ModelConfig | None = None, seed=0, identity=False, ccm_pool=None):
        """Construct a freshly initialized model.

        With ``identity=True`` every dictionary candidate is the identity
        parameter of its block, so the whole pipeline is the identity map
        regardless of the selection weights.
        """
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        k = config.dict_size
        p = {}

        if identity:
            p["dict.gain"] = Tensor(np.ones(k), requires_grad=True)
            p["dict.wb"] = Tensor(np.ones((k, 3)), requires_grad=True)
            p["dict.ccm"] = Tensor(np.broadcast_to(np.eye(3), (k, 3, 3)).copy(), requires_grad=True)
            p["dict.gamma"] = Tensor(np.ones(k), requires_grad=True)
        else:
            p["dict.gain"] = Tensor(rng.uniform(0.5, 2.0, size=k), requires_grad=True)
            wb = np.ones((k, 3), dtype=np.float32)
            wb[:, 0] = rng.uniform(1.0, 2.0, size=k)
            wb[:, 2] = rng.uniform(1.0, 2.0, size=k)
            p["dict.wb"] = Tensor(wb, requires_grad=True)
            pool = ccm_pool if ccm_pool is not None else load_builtin_ccm_pool()
            mats = np.stack([m for _, m in pool])
            ccm = np.empty((k, 3, 3), dtype=np.float32)
            for i in range(k):
                a, b = rng.choice(len(mats), size=2, replace=False)
                t = rng.uniform()
                m = t * mats[a] + (1.0 - t) * mats[b]
                ccm[i] = m / m.sum(axis=0, keepdims=True)
            ccm[0] = np.eye(3)
            p["dict.ccm"] = Tensor(ccm, requires_grad=True)
            p["dict.gamma"] = Tensor(rng.uniform(1.7, 2.7, size=k), requires_grad=True)

        for direction in ("rev", "fwd"):
            for i, (ci, co) in enumerate(TM_LAYER_DIMS):
                if identity or i == len(TM_LAYER_DIMS) - 1:
                    # zero-initialized final layer keeps the residual CNN at identity
                    kern = np.zeros((k, 3, 3, ci, co), dtype=np.float32)
                else:
                    fan_in = 9 * ci
                    kern = rng.standard_normal((k, 3, 3, ci, co)).astype(np.float32)
                    kern *= 0.1 * np.sqrt(2.0 / fan_in)
                p[f"dict.tm.{direction}.l{i}.kernel"] = Tensor(kern, requires_grad=True)
                p[f"dict.tm.{direction}.l{i}.bias"] = Tensor(np.zeros((k, co), dtype=np.float32), requires_grad=True)

        _conv_stack_params(rng, "enc.input", MAIN_ENCODER_CHANNELS, p)
        _conv_stack_params(rng, "enc.reference", MAIN_ENCODER_CHANNELS, p)
        for block in SCALAR_BLOCKS:
            dims = [(3 * k, BLOCK_ENCODER_WIDTH)] + [(BLOCK_ENCODER_WIDTH, BLOCK_ENCODER_WIDTH)] * 3
            _conv_stack_params(rng, f"enc.block.{block}", dims, p)
        dims = [(3, BLOCK_ENCODER_WIDTH)] + [(BLOCK_ENCODER_WIDTH, BLOCK_ENCODER_WIDTH)] * 3
        _conv_stack_params(rng, "enc.block.tm", dims, p)

        p["rwe.fuse.w"] = Tensor(_uniform_init(rng, (2 * FEATURE_DIM, FEATURE_DIM), 2 * FEATURE_DIM), requires_grad=True)
        p["rwe.fuse.b"] = Tensor(np.zeros(FEATURE_DIM, dtype=np.float32), requires_grad=True)
        for head in ALL_HEADS:
            p[f"rwe.head.{head}.prj.w"] = Tensor(
                _uniform_init(rng, (FEATURE_DIM, BLOCK_FEATURE_DIM), FEATURE_DIM), requires_grad=True
            )
            p[f"rwe.head.{head}.prj.b"] = Tensor(np.zeros(BLOCK_FEATURE_DIM, dtype=np.float32), requires_grad=True)
            # small final-layer init keeps the softmax near uniform at the
            # start, so every dictionary candidate keeps receiving gradient
            p[f"rwe.head.{head}.head.w"] = Tensor(
                0.1 * _uniform_init(rng, (BLOCK_FEATURE_DIM, k), BLOCK_FEATURE_DIM),
                requires_grad=True,
            )
            p[f"rwe.head.{head}.head.b"] = Tensor(np.zeros(k, dtype=np.float32), requires_grad=True)

        return Model(config=config, params=p)

    def state_arrays(self):
        """Snapshot of all parameter arrays (copies)."""
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays):
        for name, t in self.params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data[...] = src

    def detached_copy(self):
        """A gradient-free copy sharing nothing with this model (teacher use)."""
        params = {name: Tensor(t.data.copy()) for name, t in self.params.items()}
        return Model(config=self.config, params=params)

    def tm_layer_params(self, direction, weights_per_layer):
        """Mix the tone-mapping dictionaries for one direction.

        ``weights_per_layer`` is a list of 4 selection-weight Tensors.
        """
        from . import autodiff as ad

        layers = []
        for i, w in enumerate(weights_per_layer):
            kern = ad.dict_mix(self.params[f"dict.tm.{direction}.l{i}.kernel"], w)
            bias = ad.dict_mix(self.params[f"dict.tm.{direction}.l{i}.bias"], w)
            layers.append((kern, bias))
        return layers
