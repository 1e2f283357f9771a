"""Full segmentation model: embed -> merge stages -> recovery -> fusion -> heads.

Parameters live in a flat name -> Tensor registry filled in a fixed creation
order from a seeded generator, so identical (seed, config) pairs build
bit-identical models. Checkpoints serialize that registry into a little-endian
binary container with a versioned header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .boundary import (BoundaryHeadWeights, FusionWeights, boundary_head, ffm,
                       init_boundary_head_weights, init_fusion_weights,
                       patch_boundary_targets)
from .errors import ConfigurationError, StateError
from .losses import (LossConfig, LossParts, bce, cross_entropy, dice_loss,
                     focal_loss, relaxed_ce)
from .merge import (MergeRecord, PMBStageResult, init_pmb_weights,
                    init_recover_weights, pmb_stage, recover,
                    stage_token_counts)
from .patches import (EmbedWeights, TokenSet, embed, init_block_weights,
                      patchify, transformer_block, unpatchify)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MSEG"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_stages: int = 4
    merge_ratio: float = 0.25
    knn_k: int = 5
    num_classes: int = 3
    num_heads: int = 4
    num_pfe_blocks: int = 1
    sr_ratio: int = 2
    block_mlp_ratio: int = 2
    pmb_mlp_ratio: int = 4
    head_hidden: int = 0
    dw_kernel: int = 3
    boundary_hidden: int = 32
    boundary_tau: float = 0.05
    boundary_radius: int = 1
    image_size: int = 64
    image_channels: int = 3
    seed: int = 0
    dtype: str = "f32"
    use_boundary_head: bool = True
    use_ffm: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigurationError("num_stages must be >= 1")
        if not 0.0 < self.merge_ratio <= 1.0:
            raise ConfigurationError(f"merge_ratio {self.merge_ratio} outside (0, 1]")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def grid_tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side


@dataclass
class ForwardResult:
    sem_logits: Tensor               # (K, H, W) deep-path logits
    final_logits: Tensor             # (K, H, W) fused logits
    boundary_logits: Tensor | None   # (H_p, W_p) or None when the head is absent
    record: MergeRecord
    low_level: TokenSet              # pre-merge stage-1 tokens
    recovered: TokenSet
    fused: TokenSet
    stage_results: list[PMBStageResult]


class Model:
    """Owns the parameter registry and wires the forward pass together."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype

        def make(name: str, shape: tuple[int, ...], init: str) -> Tensor:
            if init == "proj":
                data = (rng.standard_normal(shape) * 0.02).astype(dt)
            elif init == "zeros":
                data = np.zeros(shape, dtype=dt)
            elif init == "ones":
                data = np.ones(shape, dtype=dt)
            else:
                raise ValueError(f"unknown init {init}")
            p = T.parameter(data, dtype=dt)
            self.params[name] = p
            return p

        def scoped(prefix: str):
            return lambda name, shape, init: make(f"{prefix}.{name}", shape, init)

        d = cfg.embed_dim
        flat = cfg.image_channels * cfg.patch_size * cfg.patch_size
        self.embed_w = EmbedWeights(
            proj=make("embed.proj", (flat, d), "proj"),
            pos=make("embed.pos", (cfg.grid_tokens, d), "proj"),
        )
        self.pfe_blocks = [init_block_weights(scoped(f"pfe.block{i}"), d, cfg.num_heads,
                                              cfg.sr_ratio, cfg.block_mlp_ratio)
                           for i in range(cfg.num_pfe_blocks)]
        self.pmb_w = [init_pmb_weights(scoped(f"pmb.{s}"), d, cfg.dw_kernel, cfg.pmb_mlp_ratio)
                      for s in range(cfg.num_stages)]
        self.prb_w = [init_recover_weights(scoped(f"prb.{s}"), d, cfg.num_heads,
                                           cfg.block_mlp_ratio)
                      for s in range(cfg.num_stages)]
        out_dim = cfg.num_classes * cfg.patch_size * cfg.patch_size
        self.sem_head = self._make_head(make, "sem_head", d, out_dim)
        self.final_head = self._make_head(make, "final_head", d, out_dim)
        self.boundary_w: BoundaryHeadWeights | None = None
        if cfg.use_boundary_head:
            self.boundary_w = init_boundary_head_weights(scoped("boundary"), d, cfg.boundary_hidden)
        self.fusion_w: FusionWeights | None = None
        if cfg.use_ffm:
            self.fusion_w = init_fusion_weights(scoped("fusion"), d)

    # -- parameter plumbing -------------------------------------------------

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def _make_head(self, make, prefix: str, d: int, out_dim: int) -> dict[str, Tensor]:
        head = {"norm_gain": make(f"{prefix}.norm.gain", (d,), "ones"),
                "norm_bias": make(f"{prefix}.norm.bias", (d,), "zeros")}
        hh = self.cfg.head_hidden
        if hh:
            head.update(w1=make(f"{prefix}.w1", (d, hh), "proj"),
                        b1=make(f"{prefix}.b1", (hh,), "zeros"),
                        w2=make(f"{prefix}.w2", (hh, out_dim), "proj"),
                        b2=make(f"{prefix}.b2", (out_dim,), "zeros"))
        else:
            head.update(w=make(f"{prefix}.w", (d, out_dim), "proj"),
                        b=make(f"{prefix}.b", (out_dim,), "zeros"))
        return head

    def _pixel_head(self, tokens: TokenSet, head: dict[str, Tensor]) -> Tensor:
        """Normalize, expand per patch to K*P*P values, scatter to (K, H, W)."""
        x = T.layer_norm(tokens.features, head["norm_gain"], head["norm_bias"])
        if "w1" in head:
            x = T.gelu(T.add_bias(T.matmul(x, head["w1"]), head["b1"]))
            logits = T.add_bias(T.matmul(x, head["w2"]), head["b2"])
        else:
            logits = T.add_bias(T.matmul(x, head["w"]), head["b"])
        return unpatchify(tokens.with_features(logits), self.cfg.patch_size)

    def forward(self, image: np.ndarray) -> ForwardResult:
        cfg = self.cfg
        img = T.constant(np.asarray(image), dtype=cfg.np_dtype)
        tokens = patchify(img, cfg.patch_size)
        tokens = embed(tokens, self.embed_w)
        for block in self.pfe_blocks:
            tokens = transformer_block(tokens, block)
        low_level = tokens

        counts = stage_token_counts(tokens.num_tokens, cfg.merge_ratio, cfg.num_stages)
        skips: list[TokenSet] = []
        stage_results: list[PMBStageResult] = []
        for s in range(cfg.num_stages):
            skips.append(tokens)
            res = pmb_stage(tokens, self.pmb_w[s], counts[s + 1], cfg.knn_k)
            stage_results.append(res)
            tokens = res.tokens
        record = MergeRecord.from_maps([r.stage_map for r in stage_results])

        recovered = recover(tokens, record, skips, self.prb_w)
        sem_logits = self._pixel_head(recovered, self.sem_head)

        fused = ffm(recovered, low_level, self.fusion_w) if self.fusion_w is not None else recovered
        final_logits = self._pixel_head(fused, self.final_head)

        blogits = boundary_head(low_level, self.boundary_w) if self.boundary_w is not None else None
        return ForwardResult(sem_logits=sem_logits, final_logits=final_logits,
                             boundary_logits=blogits, record=record, low_level=low_level,
                             recovered=recovered, fused=fused, stage_results=stage_results)

    def logits(self, image: np.ndarray) -> np.ndarray:
        return self.forward(image).final_logits.data

    def predict(self, image: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(image), axis=0)

    # -- losses ---------------------------------------------------------------

    def loss_parts(self, out: ForwardResult, labels: np.ndarray, boundary) -> LossParts:
        cfg = self.cfg
        gamma = cfg.loss.focal_gamma
        zero = T.constant(np.zeros(()), dtype=cfg.np_dtype)
        if out.boundary_logits is not None:
            targets = patch_boundary_targets(boundary, cfg.patch_size, cfg.boundary_tau)
            dl = dice_loss(T.sigmoid(out.boundary_logits), targets)
            bl = bce(out.boundary_logits, targets)
        else:
            dl = bl = zero
        return LossParts(
            focal_semantic=focal_loss(out.sem_logits, labels, gamma),
            relaxed_semantic=relaxed_ce(out.sem_logits, labels, boundary,
                                        cfg.loss.relaxation_margin),
            dice_boundary=dl,
            bce_boundary=bl,
            focal_final=focal_loss(out.final_logits, labels, gamma),
            ce_final=cross_entropy(out.final_logits, labels),
        )

    # -- checkpoints ----------------------------------------------------------

    def state_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(self.params))]
        for name, p in self.params.items():
            raw = name.encode("utf-8")
            arr = p.data
            code = 0 if arr.dtype == np.float32 else 1
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<BB", code, arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f4" if code == 0 else "<f8").tobytes())
        return b"".join(chunks)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.state_bytes())

    def load_state(self, table: dict[str, np.ndarray]) -> None:
        if set(table) != set(self.params):
            missing = set(self.params) - set(table)
            extra = set(table) - set(self.params)
            raise StateError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in table.items():
            p = self.params[name]
            if arr.shape != p.data.shape:
                raise StateError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype))

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> Model:
        table = read_checkpoint(path)
        has_boundary = any(n.startswith("boundary.") for n in table)
        has_fusion = any(n.startswith("fusion.") for n in table)
        cfg = replace(cfg, use_boundary_head=has_boundary, use_ffm=has_fusion)
        model = cls(cfg)
        model.load_state(table)
        return model


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_checkpoint(blob)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise StateError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise StateError(f"unsupported checkpoint version {version}")
    off = 12
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = np.dtype("<f4") if code == 0 else np.dtype("<f8")
        nbytes = int(np.prod(shape)) * dt.itemsize if ndim else dt.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(shape)
        off += nbytes
        table[name] = arr.copy()
    return table


def strip_boundary_head(model: Model) -> Model:
    """Drop the auxiliary boundary head; inference outputs are unchanged.

    The low-level path into fusion stays; only the head's parameters and its
    loss wiring disappear, so the stripped model produces bit-identical
    logits.
    """
    cfg = replace(model.cfg, use_boundary_head=False)
    stripped = Model(cfg)
    for name, p in stripped.params.items():
        p.data = model.params[name].data
    return stripped
