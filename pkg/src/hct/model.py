"""Hyper-connected transformer for paired PET/CT slices, its fusion-strategy
ablation variants, and the checkpoint file format.

Data flow of the full model (variant ``HCT``)::

    pet ─ backbone ─ proj ─ +pos ─ T x transformer ─┐
    ct  ─ backbone ─ proj ─ +pos ─ T x transformer ─┼─ concat(3N) ─ +pos3 ─ T x transformer
    cat ─ backbone ─ proj ─ +pos ─ T x transformer ─┘        ─ split ─ mean ─ head ─ softmax
          └── /4 skip ────────────────────────────────────────────────────────┘
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, DimensionError, FormatError
from .nn import ParamStore, Scope

VARIANTS = ("HCT", "HF-TN", "EF-TN", "LF-TN", "EF-FCN", "LF-FCN", "HF-FCN")
CHECKPOINT_FORMAT = "hct-checkpoint"
CHECKPOINT_VERSION = 1
# the head upsamples on pixel centers so /16 and /4 maps stay registered to the input grid
HEAD_ALIGN = "centers"
# tumor pixels are a few percent of a slice; the final bias starts at that prior
FG_PRIOR = 0.05


@dataclass
class ModelConfig:
    h: int = 64
    w: int = 64
    d_embed: int = 256
    depth: int = 4
    n_heads: int = 4
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)
    n_classes: int = 2
    variant: str = "HCT"

    def __post_init__(self):
        self.backbone_widths = tuple(int(c) for c in self.backbone_widths)

    def validate(self) -> "ModelConfig":
        if self.h % 16 or self.w % 16 or self.h < 16 or self.w < 16:
            raise ConfigError(f"input size {self.h}x{self.w} must be a positive multiple of 16")
        if self.d_embed % self.n_heads:
            raise ConfigError(f"d_embed {self.d_embed} is not divisible by n_heads {self.n_heads}")
        if self.d_embed % 4 or self.d_embed < 4:
            raise ConfigError(f"d_embed {self.d_embed} must be a positive multiple of 4 (head taper D/2, D/4)")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.backbone_widths) != 4 or min(self.backbone_widths) < 1:
            raise ConfigError(f"backbone_widths needs 4 positive entries, got {self.backbone_widths}")
        if self.n_classes != 2:
            raise ConfigError("only binary segmentation (n_classes=2) is supported")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.h // 16, self.w // 16

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class BranchEmbeddings:
    e_pet: Tensor
    e_ct: Tensor
    e_con: Tensor

    def __post_init__(self):
        shapes = {self.e_pet.shape, self.e_ct.shape, self.e_con.shape}
        if len(shapes) != 1:
            raise DimensionError(f"branch embeddings disagree in shape: {sorted(shapes)}")


# backbone -------------------------------------------------------------------


def init_backbone(scope: Scope, cin: int, widths, rng) -> None:
    c1, c2, c3, c4 = widths
    nn.init_conv(scope.scope("stem"), cin, c1, 3, rng, bias=False, gain=nn.NORMED_CONV_GAIN)
    nn.init_norm(scope.scope("stem_norm"), c1)
    nn.init_residual_block(scope.scope("stage2"), c1, c2, 2, rng)
    nn.init_residual_block(scope.scope("stage3"), c2, c3, 2, rng)
    nn.init_residual_block(scope.scope("stage4"), c3, c4, 2, rng)


def backbone_forward(image: Tensor, scope: Scope) -> tuple[Tensor, Tensor]:
    """Four stride-2 stages; returns the /16 map and the /4 skip map."""
    h, w = image.shape[-2:]
    if h % 16 or w % 16:
        raise ConfigError(f"backbone input {h}x{w} is not divisible by 16")
    x = nn.conv(image, scope.scope("stem"), stride=2, pad=nn.same_pad(3, 2))
    x = ag.relu(nn.group_norm(x, scope.scope("stem_norm")))
    skip = nn.residual_block(x, scope.scope("stage2"), stride=2)
    x = nn.residual_block(skip, scope.scope("stage3"), stride=2)
    deep = nn.residual_block(x, scope.scope("stage4"), stride=2)
    return deep, skip


# encoder branch / decoder ---------------------------------------------------


def init_encoder_branch(scope: Scope, cin: int, cfg: ModelConfig, rng) -> None:
    init_backbone(scope.scope("backbone"), cin, cfg.backbone_widths, rng)
    nn.init_conv(scope.scope("proj"), cfg.backbone_widths[3], cfg.d_embed, 1, rng)
    scope.add("pos", nn.trunc_normal_init(cfg.n_tokens, cfg.d_embed, rng=rng))
    nn.init_transformer_stack(scope.scope("encoder"), cfg.depth, cfg.d_embed, rng)


def embed(image: Tensor, scope: Scope) -> tuple[Tensor, Tensor]:
    """Backbone, 1x1 projection and flattening: (B, N, D) tokens and the skip map."""
    deep, skip = backbone_forward(image, scope.scope("backbone"))
    tokens = nn.flatten_to_tokens(nn.conv(deep, scope.scope("proj")))
    return tokens, skip


def encoder_branch(image: Tensor, scope: Scope, cfg: ModelConfig, record=None) -> tuple[Tensor, Tensor]:
    tokens, skip = embed(image, scope)
    pos = scope["pos"]
    if pos.shape != tokens.shape[1:]:
        raise DimensionError(f"positional table {pos.shape} does not match tokens {tokens.shape[1:]}")
    x = nn.transformer_stack(tokens + pos, scope.scope("encoder"), cfg.depth, cfg.n_heads, record)
    return x, skip


def init_hyper_decoder(scope: Scope, cfg: ModelConfig, rng) -> None:
    scope.add("pos", nn.trunc_normal_init(3 * cfg.n_tokens, cfg.d_embed, rng=rng))
    nn.init_transformer_stack(scope.scope("decoder"), cfg.depth, cfg.d_embed, rng)


def hyper_decoder(b: BranchEmbeddings, scope: Scope, cfg: ModelConfig, record=None) -> Tensor:
    """Joint attention over the [PET, CT, CON] token concatenation.

    The 3N output tokens are split back into three aligned streams and
    averaged, giving N tokens that line up with the /16 grid.
    """
    n = b.e_pet.shape[-2]
    x = ag.concat([b.e_pet, b.e_ct, b.e_con], axis=-2)
    pos = scope["pos"]
    if pos.shape != x.shape[-2:]:
        raise DimensionError(f"decoder positional table {pos.shape} does not match {x.shape[-2:]}")
    x = nn.transformer_stack(x + pos, scope.scope("decoder"), cfg.depth, cfg.n_heads, record)
    pet, ct, con = x[..., :n, :], x[..., n : 2 * n, :], x[..., 2 * n :, :]
    return (pet + ct + con) * (1.0 / 3.0)


# head -----------------------------------------------------------------------


def init_head(scope: Scope, d: int, skip_channels: int, rng) -> None:
    nn.init_conv(scope.scope("conv1"), d, d // 2, 3, rng)
    nn.init_conv(scope.scope("conv2"), d // 2, d // 4, 3, rng)
    nn.init_conv(scope.scope("skip"), skip_channels, d // 4, 1, rng)
    nn.init_conv(scope.scope("final"), d // 4, 2, 1, rng)
    scope["final.b"].data[:] = [0.0, np.log(FG_PRIOR / (1.0 - FG_PRIOR))]


def head_from_map(fmap: Tensor, skip: Tensor, scope: Scope, out_hw: tuple[int, int]) -> Tensor:
    h, w = out_hw
    gh, gw = fmap.shape[-2:]
    if skip.shape[-2:] != (4 * gh, 4 * gw) or (h, w) != (16 * gh, 16 * gw):
        raise DimensionError(
            f"skip map {skip.shape[-2:]} must be (H/4, W/4) = {(4 * gh, 4 * gw)} for output {out_hw}"
        )
    x = ag.relu(nn.conv(fmap, scope.scope("conv1"), pad=1))
    x = ag.relu(nn.conv(x, scope.scope("conv2"), pad=1))
    x = ag.relu(nn.bilinear_resize(x, 4 * gh, 4 * gw, HEAD_ALIGN) + nn.conv(skip, scope.scope("skip")))
    x = nn.bilinear_resize(x, h, w, HEAD_ALIGN)
    logits = nn.conv(x, scope.scope("final"))
    return ag.softmax(logits, axis=1)


def segmentation_head(tokens: Tensor, skip: Tensor, scope: Scope, cfg: ModelConfig) -> Tensor:
    """(B, N, D) tokens plus the /4 skip map -> (B, 2, H, W) class probabilities."""
    gh, gw = cfg.grid
    if tokens.shape[-2] != gh * gw:
        raise DimensionError(f"head expects {gh * gw} tokens, got {tokens.shape[-2]}")
    return head_from_map(nn.tokens_to_map(tokens, gh, gw), skip, scope, (cfg.h, cfg.w))


# full forward passes --------------------------------------------------------


def init_hct(store: ParamStore, cfg: ModelConfig, rng) -> None:
    root = store.scope("")
    init_encoder_branch(root.scope("pet"), 1, cfg, rng)
    init_encoder_branch(root.scope("ct"), 1, cfg, rng)
    init_encoder_branch(root.scope("con"), 2, cfg, rng)
    init_hyper_decoder(root.scope("fusion"), cfg, rng)
    init_head(root.scope("head"), cfg.d_embed, cfg.backbone_widths[1], rng)


def hct_forward(pet: Tensor, ct: Tensor, params: ParamStore, cfg: ModelConfig, record=None) -> Tensor:
    root = params.scope("")
    e_pet, _ = encoder_branch(pet, root.scope("pet"), cfg)
    e_ct, _ = encoder_branch(ct, root.scope("ct"), cfg)
    e_con, skip = encoder_branch(ag.concat([pet, ct], axis=1), root.scope("con"), cfg)
    fused = hyper_decoder(BranchEmbeddings(e_pet, e_ct, e_con), root.scope("fusion"), cfg, record)
    return segmentation_head(fused, skip, root.scope("head"), cfg)


def _init_tn_pipeline(scope: Scope, cin: int, cfg: ModelConfig, rng) -> None:
    init_encoder_branch(scope.scope("branch"), cin, cfg, rng)
    nn.init_transformer_stack(scope.scope("decoder"), cfg.depth, cfg.d_embed, rng)
    init_head(scope.scope("head"), cfg.d_embed, cfg.backbone_widths[1], rng)


def _tn_pipeline(image: Tensor, scope: Scope, cfg: ModelConfig, record=None) -> Tensor:
    tokens, skip = encoder_branch(image, scope.scope("branch"), cfg)
    tokens = nn.transformer_stack(tokens, scope.scope("decoder"), cfg.depth, cfg.n_heads, record)
    return segmentation_head(tokens, skip, scope.scope("head"), cfg)


def _init_fcn_branch(scope: Scope, cin: int, cfg: ModelConfig, rng) -> None:
    init_backbone(scope.scope("backbone"), cin, cfg.backbone_widths, rng)
    nn.init_conv(scope.scope("proj"), cfg.backbone_widths[3], cfg.d_embed, 1, rng)


def _fcn_branch(image: Tensor, scope: Scope) -> tuple[Tensor, Tensor]:
    deep, skip = backbone_forward(image, scope.scope("backbone"))
    return nn.conv(deep, scope.scope("proj")), skip


def _init_fcn_fuse(scope: Scope, cin: int, d: int, rng) -> None:
    nn.init_residual_block(scope.scope("block0"), cin, d, 1, rng)
    nn.init_residual_block(scope.scope("block1"), d, d, 1, rng)


def _fcn_fuse(x: Tensor, scope: Scope) -> Tensor:
    return nn.residual_block(nn.residual_block(x, scope.scope("block0")), scope.scope("block1"))


def _init_fcn_pipeline(scope: Scope, cin: int, cfg: ModelConfig, rng) -> None:
    _init_fcn_branch(scope.scope("branch"), cin, cfg, rng)
    _init_fcn_fuse(scope.scope("fuse"), cfg.d_embed, cfg.d_embed, rng)
    init_head(scope.scope("head"), cfg.d_embed, cfg.backbone_widths[1], rng)


def _fcn_pipeline(image: Tensor, scope: Scope, cfg: ModelConfig) -> Tensor:
    fmap, skip = _fcn_branch(image, scope.scope("branch"))
    return head_from_map(_fcn_fuse(fmap, scope.scope("fuse")), skip, scope.scope("head"), (cfg.h, cfg.w))


class SegmentationModel:
    """A variant's parameters plus its forward pass.

    ``forward`` takes (B, 1, H, W) normalized PET and CT and returns a
    (B, 2, H, W) probability tensor; channel 1 is tumor.
    """

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    @property
    def variant(self) -> str:
        return self.config.variant

    def n_params(self) -> int:
        return self.params.n_params()

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=self.params.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        return Tensor(x)

    def forward(self, pet, ct, record: list | None = None) -> Tensor:
        pet, ct = self._as_input(pet), self._as_input(ct)
        if pet.shape != ct.shape:
            raise DimensionError(f"PET {pet.shape} and CT {ct.shape} shapes differ")
        if pet.shape[-2:] != (self.config.h, self.config.w):
            raise DimensionError(f"model expects {self.config.h}x{self.config.w} inputs, got {pet.shape[-2:]}")
        cfg, root = self.config, self.params.scope("")
        kind = cfg.variant
        if kind in ("HCT", "HF-TN"):
            return hct_forward(pet, ct, self.params, cfg, record)
        if kind == "EF-TN":
            return _tn_pipeline(ag.concat([pet, ct], axis=1), root.scope("ef"), cfg, record)
        if kind == "LF-TN":
            p = _tn_pipeline(pet, root.scope("pet"), cfg, record)
            c = _tn_pipeline(ct, root.scope("ct"), cfg, record)
            return (p + c) * 0.5
        if kind == "EF-FCN":
            return _fcn_pipeline(ag.concat([pet, ct], axis=1), root.scope("ef"), cfg)
        if kind == "LF-FCN":
            return (_fcn_pipeline(pet, root.scope("pet"), cfg) + _fcn_pipeline(ct, root.scope("ct"), cfg)) * 0.5
        if kind == "HF-FCN":
            f_pet, _ = _fcn_branch(pet, root.scope("pet"))
            f_ct, _ = _fcn_branch(ct, root.scope("ct"))
            f_con, skip = _fcn_branch(ag.concat([pet, ct], axis=1), root.scope("con"))
            fused = _fcn_fuse(ag.concat([f_pet, f_ct, f_con], axis=1), root.scope("fuse"))
            return head_from_map(fused, skip, root.scope("head"), (cfg.h, cfg.w))
        raise ConfigError(f"unknown variant {kind!r}")

    __call__ = forward

    def predict(self, pet, ct) -> np.ndarray:
        return self.forward(pet, ct).data


def build_variant(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SegmentationModel:
    """Initialize the parameters of ``config.variant`` from ``seed``."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    root = store.scope("")
    kind = cfg.variant
    if kind in ("HCT", "HF-TN"):
        init_hct(store, cfg, rng)
    elif kind == "EF-TN":
        _init_tn_pipeline(root.scope("ef"), 2, cfg, rng)
    elif kind == "LF-TN":
        _init_tn_pipeline(root.scope("pet"), 1, cfg, rng)
        _init_tn_pipeline(root.scope("ct"), 1, cfg, rng)
    elif kind == "EF-FCN":
        _init_fcn_pipeline(root.scope("ef"), 2, cfg, rng)
    elif kind == "LF-FCN":
        _init_fcn_pipeline(root.scope("pet"), 1, cfg, rng)
        _init_fcn_pipeline(root.scope("ct"), 1, cfg, rng)
    elif kind == "HF-FCN":
        for name, cin in (("pet", 1), ("ct", 1), ("con", 2)):
            _init_fcn_branch(root.scope(name), cin, cfg, rng)
        _init_fcn_fuse(root.scope("fuse"), 3 * cfg.d_embed, cfg.d_embed, rng)
        init_head(root.scope("head"), cfg.d_embed, cfg.backbone_widths[1], rng)
    return SegmentationModel(cfg, store)


def parameter_counts(config: ModelConfig, variants=VARIANTS) -> dict[str, int]:
    out = {}
    for v in variants:
        cfg = ModelConfig.from_dict({**config.to_dict(), "variant": v})
        out[v] = build_variant(cfg).n_params()
    return out


# checkpoints ----------------------------------------------------------------
#
# Layout: one line of UTF-8 JSON (the manifest) terminated by "\n", then the
# float32 little-endian payloads of every listed tensor, concatenated in
# manifest order.  Nothing follows the last payload.


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    tensors = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "float32",
        "config": config,
        "meta": meta or {},
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config dict, name -> float32 array, meta dict)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    payload = memoryview(raw)[newline + 1 :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: payload truncated inside tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing bytes after the last tensor")
    return manifest["config"], arrays, manifest.get("meta", {})


def save_model(path, model: SegmentationModel, extra: dict[str, np.ndarray] | None = None, meta=None) -> None:
    arrays = dict(model.params.state())
    if extra:
        arrays.update(extra)
    save_checkpoint(path, arrays, model.config.to_dict(), meta)


def load_model(path, config: ModelConfig | None = None) -> tuple[SegmentationModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint.

    ``config`` overrides the stored one; a config whose parameter shapes
    disagree with the file raises DimensionError.  Returns the model, any
    non-parameter arrays (optimizer state) and the meta dict.
    """
    stored, arrays, meta = load_checkpoint(path)
    cfg = config or ModelConfig.from_dict(stored)
    model = build_variant(cfg)
    params = {k: v for k, v in arrays.items() if k in model.params}
    extra = {k: v for k, v in arrays.items() if k not in model.params}
    model.params.load_state(params)
    return model, extra, meta
