"""The scene regression network and its two inference entry points.

``SceneRegressor.regress_scene`` runs anchor images through L alternating
attention layers with full cross-view attention, collecting the downsampled
post-frame-attention tokens of every layer into a ``SceneRepresentation``.
``SceneRegressor.localize`` then poses arbitrary query images against that
representation: each layer applies frame-wise attention to the query tokens
and attends to the cached layer entry, so queries never influence each other
or the representation.

Patch embedding is a learned linear map over p x p x 3 patches plus a learned
2-D position embedding; the dense head is a per-token MLP emitting a p x p
block of (depth, depth confidence, scene coordinates, coordinate confidence)
values per patch. Confidences are parameterized as 1 + exp(logit) and depth
as exp(logit), so positivity bounds hold for any finite weights.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import geometry as geo
from .attention import (
    ANCHOR,
    QUERY,
    AlternatingBlock,
    AttentionMask,
    InvalidConfigurationError,
    RepresentationCache,
    ShapeError,
    TokenGrid,
    TransformerSubLayer,
    build_localization_mask,
    cached_attend,
)

CHECKPOINT_MAGIC = b"SAILCKPT"
REPRESENTATION_MAGIC = b"SAILREPR"

# token_kind provenance codes: >= 0 is a patch position, negatives are specials
KIND_CAMERA = -1
KIND_REGISTER = (-2, -3, -4, -5)

_LOGIT_CLAMP = 30.0


class EmptyAnchorError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


class IncompatibleRepresentationError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """Toy-scale defaults: 64x64 inputs, 8px patches, 6 layers of 128 channels."""

    image_width: int = 64
    image_height: int = 64
    patch_size: int = 8
    channels: int = 128
    layers: int = 6
    heads: int = 4
    anchor_count: int = 4
    downsample_ratio: float = 0.5

    def __post_init__(self):
        if self.image_width % self.patch_size or self.image_height % self.patch_size:
            raise InvalidConfigurationError("image size must be divisible by patch size")
        if self.channels % self.heads:
            raise InvalidConfigurationError("channels must be divisible by heads")
        if self.layers < 2:
            raise InvalidConfigurationError("need at least 2 layers")
        if not 0.05 <= self.downsample_ratio <= 1.0:
            raise InvalidConfigurationError("downsample_ratio must lie in [0.05, 1.0]")
        if self.anchor_count < 1:
            raise InvalidConfigurationError("anchor_count must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_width // self.patch_size) * (self.image_height // self.patch_size)

    @property
    def tokens_per_frame(self) -> int:
        return self.num_patches + 5

    @property
    def resolution(self):
        return (self.image_width, self.image_height)

    def pack(self) -> bytes:
        return struct.pack(
            "<7i f",
            self.image_width,
            self.image_height,
            self.patch_size,
            self.channels,
            self.layers,
            self.heads,
            self.anchor_count,
            self.downsample_ratio,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "NetworkConfig":
        vals = struct.unpack("<7i f", blob)
        return cls(*vals[:7], downsample_ratio=vals[7])

    def fingerprint(self) -> int:
        """64-bit config hash embedded in representation files."""
        digest = hashlib.blake2b(self.pack(), digest_size=8).digest()
        return struct.unpack("<Q", digest)[0]


@dataclass
class SceneRepresentation:
    """Layered anchor-token map plus the anchor camera tokens for the pose head."""

    cache: RepresentationCache
    token_kind: np.ndarray            # (M,) patch index or special-token code
    anchor_camera_tokens: torch.Tensor  # (N, C) final-layer camera tokens
    anchor_frame_ids: list
    scale: float
    fingerprint: int

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_frame_ids)

    @property
    def layer_token_counts(self) -> list[int]:
        return [int(t.shape[0]) for t in self.cache.layer_tokens]

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for t in self.cache.layer_tokens:
            h.update(t.detach().numpy().astype("<f4").tobytes())
        h.update(self.anchor_camera_tokens.detach().numpy().astype("<f4").tobytes())
        return h.hexdigest()


@dataclass
class FrameResult:
    frame_id: object
    pose: geo.CameraPose
    dense: geo.DenseOutput


@dataclass
class JointForward:
    """Raw masked-pass outputs for all frames (training path; keeps gradients)."""

    pose_enc: torch.Tensor    # (M, 9)
    depth: torch.Tensor       # (M, H, W)
    depth_conf: torch.Tensor  # (M, H, W)
    scm: torch.Tensor         # (M, H, W, 3)
    scm_conf: torch.Tensor    # (M, H, W)
    anchor_count: int


def sample_patch_indices(config: NetworkConfig, n_frames: int, r: float, seed: int) -> np.ndarray:
    """One sorted index set per frame, shared across every attention layer."""
    if not 0.0 < r <= 1.0:
        raise InvalidConfigurationError(f"downsample ratio {r} outside (0, 1]")
    k = int(np.floor(r * config.num_patches))
    if k == 0:
        raise EmptySelectionError(f"ratio {r} selects zero of {config.num_patches} patches")
    rng = np.random.default_rng(seed)
    return np.stack(
        [np.sort(rng.choice(config.num_patches, size=k, replace=False)) for _ in range(n_frames)]
    )


def extract_representation(stage_frames, indices: np.ndarray):
    """Theta: keep camera + register tokens and the selected patch tokens.

    ``stage_frames`` is a list of per-frame (T, C) post-frame-attention token
    tensors; ``indices`` is the (N, k) per-frame patch selection. Returns the
    downsampled (M, C) tokens with (frame_index, token_kind) provenance.
    """
    picked, frame_index, token_kind = [], [], []
    for f, tokens in enumerate(stage_frames):
        sel = torch.cat([tokens[:5], tokens[5 + indices[f]]])
        picked.append(sel)
        frame_index += [f] * sel.shape[0]
        token_kind += [KIND_CAMERA, *KIND_REGISTER, *indices[f].tolist()]
    return torch.cat(picked), np.asarray(frame_index), np.asarray(token_kind)


class DenseHead(nn.Module):
    """Per-token MLP emitting a p x p block of dense values per patch."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        p = config.patch_size
        self.norm = nn.LayerNorm(config.channels)
        self.fc1 = nn.Linear(config.channels, 2 * config.channels)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(2 * config.channels, p * p * 6)

    def forward(self, patch_tokens: torch.Tensor):
        """patch_tokens (..., K, C) -> (depth, depth_conf, scm, scm_conf) maps."""
        cfg = self.config
        if patch_tokens.shape[-2] != cfg.num_patches:
            raise ShapeError(
                f"expected {cfg.num_patches} patch tokens, got {patch_tokens.shape[-2]}"
            )
        squeeze = patch_tokens.ndim == 2
        if squeeze:
            patch_tokens = patch_tokens.unsqueeze(0)
        b = patch_tokens.shape[0]
        p = cfg.patch_size
        gh, gw = cfg.image_height // p, cfg.image_width // p
        out = self.fc2(self.act(self.fc1(self.norm(patch_tokens))))
        out = out.view(b, gh, gw, p, p, 6).permute(0, 1, 3, 2, 4, 5)
        out = out.reshape(b, cfg.image_height, cfg.image_width, 6)
        out = out.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
        depth = torch.exp(out[..., 0])
        depth_conf = 1.0 + torch.exp(out[..., 1])
        scm = out[..., 2:5]
        scm_conf = 1.0 + torch.exp(out[..., 5])
        if squeeze:
            return depth[0], depth_conf[0], scm[0], scm_conf[0]
        return depth, depth_conf, scm, scm_conf


class PoseHead(nn.Module):
    """Two attention layers over camera tokens, then a linear map to the
    9-value pose encoding; the quaternion slice is normalized and sign-fixed."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            [TransformerSubLayer(config.channels, config.heads) for _ in range(2)]
        )
        self.norm = nn.LayerNorm(config.channels)
        self.out = nn.Linear(config.channels, 9)

    def forward(self, camera_tokens: torch.Tensor, mask: AttentionMask | None = None):
        x = camera_tokens
        allowed = mask.allowed if mask is not None else None
        for block in self.blocks:
            x = block(x, allowed=allowed)
        g = self.out(self.norm(x))
        q = g[:, :4]
        q = q / q.norm(dim=1, keepdim=True).clamp_min(1e-8)
        q = q * torch.where(q[:, :1] < 0, -1.0, 1.0)
        return torch.cat([q, g[:, 4:]], dim=1)


class SceneRegressor(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        c, p = config.channels, config.patch_size
        self.patch_embed = nn.Linear(p * p * 3, c)
        self.pos_embed = nn.Parameter(torch.zeros(config.num_patches, c))
        self.camera_init = nn.Parameter(torch.zeros(1, c))
        self.register_init = nn.Parameter(torch.zeros(4, c))
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.camera_init, std=0.02)
        nn.init.normal_(self.register_init, std=0.02)
        self.blocks = nn.ModuleList(
            [AlternatingBlock(c, config.heads) for _ in range(config.layers)]
        )
        self.dense_head = DenseHead(config)
        self.pose_head = PoseHead(config)

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    # ------------------------------------------------------------------
    # embedding
    # ------------------------------------------------------------------

    def _to_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            t = images.to(self.dtype)
        else:
            t = torch.as_tensor(np.asarray(images), dtype=self.dtype)
        if t.ndim == 3:
            t = t.unsqueeze(0)
        cfg = self.config
        if t.shape[1:] != (cfg.image_height, cfg.image_width, 3):
            raise ShapeError(
                f"images must be (H, W, 3) = ({cfg.image_height}, {cfg.image_width}, 3),"
                f" got {tuple(t.shape[1:])}"
            )
        return t

    def embed(self, images) -> torch.Tensor:
        """Images (M, H, W, 3) in [0, 1] to per-frame tokens (M, K + 5, C)."""
        t = self._to_tensor(images)
        m = t.shape[0]
        cfg = self.config
        p = cfg.patch_size
        gh, gw = cfg.image_height // p, cfg.image_width // p
        patches = t.view(m, gh, p, gw, p, 3).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(m, cfg.num_patches, p * p * 3)
        tokens = self.patch_embed(patches) + self.pos_embed
        camera = self.camera_init.expand(m, 1, cfg.channels)
        registers = self.register_init.expand(m, 4, cfg.channels)
        return torch.cat([camera, registers, tokens], dim=1)

    def embed_frame(self, image, frame_id: int = 0) -> TokenGrid:
        return TokenGrid.from_tokens(frame_id, self.embed(image)[0])

    # ------------------------------------------------------------------
    # scene regression (anchors, full attention)
    # ------------------------------------------------------------------

    def regress_scene(self, anchor_images, r: float | None = None, seed: int = 0,
                      frame_ids=None, scale: float = 1.0):
        """Build the scene representation; also returns per-anchor results."""
        tokens = self.embed(anchor_images)
        n = tokens.shape[0]
        if n == 0:
            raise EmptyAnchorError("scene regression needs at least one anchor image")
        r = self.config.downsample_ratio if r is None else r
        frame_ids = list(range(n)) if frame_ids is None else list(frame_ids)
        indices = sample_patch_indices(self.config, n, r, seed)

        frames = list(tokens)
        layer_tokens, provenance = [], None
        for block in self.blocks:
            frames, stage = block(frames)
            picked, frame_index, token_kind = extract_representation(stage, indices)
            layer_tokens.append(picked)
            provenance = (frame_index, token_kind)

        camera_tokens = torch.stack([f[0] for f in frames])
        pose_enc = self.pose_head(camera_tokens)
        dense = self.dense_head(torch.stack([f[5:] for f in frames]))
        rep = SceneRepresentation(
            cache=RepresentationCache(layer_tokens, provenance[0]),
            token_kind=provenance[1],
            anchor_camera_tokens=camera_tokens,
            anchor_frame_ids=frame_ids,
            scale=scale,
            fingerprint=self.config.fingerprint(),
        )
        results = [
            self._frame_result(frame_ids[i], pose_enc[i], [d[i] for d in dense])
            for i in range(n)
        ]
        return rep, results

    # ------------------------------------------------------------------
    # localization (cached path)
    # ------------------------------------------------------------------

    def _check_representation(self, rep: SceneRepresentation):
        if rep.fingerprint != self.config.fingerprint():
            raise IncompatibleRepresentationError(
                "representation was built with a different network configuration"
            )
        if rep.cache.num_layers != self.config.layers:
            raise IncompatibleRepresentationError(
                f"representation has {rep.cache.num_layers} layers, model has "
                f"{self.config.layers}"
            )

    def _localize_tokens(self, images, rep: SceneRepresentation) -> torch.Tensor:
        x = self.embed(images)  # (B, T, C)
        for j, block in enumerate(self.blocks):
            stage = block.frame_attn(x)
            x = cached_attend(stage, rep.cache, j, block)
        return x

    def _pose_head_masked(self, query_camera_tokens: torch.Tensor,
                          rep: SceneRepresentation) -> torch.Tensor:
        n, b = rep.num_anchors, query_camera_tokens.shape[0]
        tokens = torch.cat([rep.anchor_camera_tokens, query_camera_tokens])
        mask = build_localization_mask(
            [(i, 1) for i in range(n)], [(n + i, 1) for i in range(b)]
        )
        return self.pose_head(tokens, mask)[n:]

    def localize(self, query_image, rep: SceneRepresentation, frame_id=0) -> FrameResult:
        return self.localize_batch([query_image], rep, frame_ids=[frame_id])[0]

    def localize_batch(self, query_images, rep: SceneRepresentation,
                       batch_size: int = 8, frame_ids=None) -> list[FrameResult]:
        """Map localize over queries; results are batch-size independent
        because queries only ever attend to themselves and the cache."""
        if batch_size < 1:
            raise InvalidConfigurationError("batch_size must be >= 1")
        self._check_representation(rep)
        queries = list(query_images)
        if frame_ids is None:
            frame_ids = list(range(len(queries)))
        results = []
        with torch.no_grad():
            for start in range(0, len(queries), batch_size):
                chunk = queries[start : start + batch_size]
                images = torch.stack([self._to_tensor(q)[0] for q in chunk])
                x = self._localize_tokens(images, rep)
                pose_enc = self._pose_head_masked(x[:, 0], rep)
                dense = self.dense_head(x[:, 5:])
                for i in range(len(chunk)):
                    results.append(
                        self._frame_result(
                            frame_ids[start + i], pose_enc[i], [d[i] for d in dense]
                        )
                    )
        return results

    # ------------------------------------------------------------------
    # joint masked pass (training; also the reference for localization)
    # ------------------------------------------------------------------

    def forward_joint(self, images, anchor_count: int, r: float | None = None,
                      seed: int = 0, masked: bool = True) -> JointForward:
        """One pass over anchors + queries under the localization mask.

        With ``masked=False`` every frame attends to every frame (the joint
        regression baseline; no anchor/query distinction in the attention).
        """
        tokens = self.embed(images)
        m = tokens.shape[0]
        if not 1 <= anchor_count <= m:
            raise EmptyAnchorError(f"anchor_count {anchor_count} outside [1, {m}]")
        r = self.config.downsample_ratio if r is None else r
        t_per = self.config.tokens_per_frame

        mask = None
        pose_mask = None
        if masked:
            indices = sample_patch_indices(self.config, anchor_count, r, seed)
            cached = np.zeros(anchor_count * t_per, dtype=bool)
            for f in range(anchor_count):
                base = f * t_per
                cached[base : base + 5] = True
                cached[base + 5 + indices[f]] = True
            mask = build_localization_mask(
                [(i, t_per) for i in range(anchor_count)],
                [(i, t_per) for i in range(anchor_count, m)],
                anchor_cached=cached,
            )
            pose_mask = build_localization_mask(
                [(i, 1) for i in range(anchor_count)],
                [(i, 1) for i in range(anchor_count, m)],
            )

        frames = list(tokens)
        for block in self.blocks:
            frames, _ = block(frames, mask=mask)
        camera_tokens = torch.stack([f[0] for f in frames])
        pose_enc = self.pose_head(camera_tokens, pose_mask)
        depth, depth_conf, scm, scm_conf = self.dense_head(
            torch.stack([f[5:] for f in frames])
        )
        return JointForward(pose_enc, depth, depth_conf, scm, scm_conf, anchor_count)

    # ------------------------------------------------------------------

    def _frame_result(self, frame_id, pose_enc: torch.Tensor, dense_maps) -> FrameResult:
        depth, depth_conf, scm, scm_conf = (
            d.detach().double().numpy() for d in dense_maps
        )
        h, w = depth.shape
        dense = geo.DenseOutput(
            depth=depth,
            depth_conf=depth_conf,
            scm=scm,
            scm_conf=scm_conf,
            valid=np.ones((h, w), dtype=bool),
        )
        pose = geo.decode_pose(pose_enc.detach().double().numpy())
        return FrameResult(frame_id=frame_id, pose=pose, dense=dense)


# ---------------------------------------------------------------------------
# checkpoint / representation files
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: SceneRegressor) -> None:
    """Versioned binary container: magic, config block, named f32 tensors."""
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(model.config.pack())
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).numpy()
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_checkpoint(path) -> SceneRegressor:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        config = NetworkConfig.unpack(fh.read(struct.calcsize("<7i f")))
        model = SceneRegressor(config)
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n_items = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(4 * n_items), dtype="<f4").reshape(dims)
            state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
        return model


def save_representation(path, rep: SceneRepresentation) -> None:
    with open(path, "wb") as fh:
        fh.write(REPRESENTATION_MAGIC)
        fh.write(struct.pack("<Q", rep.fingerprint))
        fh.write(struct.pack("<d", rep.scale))
        fh.write(struct.pack("<I", rep.num_anchors))
        for fid in rep.anchor_frame_ids:
            fh.write(struct.pack("<q", int(fid)))
        layers = rep.cache.layer_tokens
        c = layers[0].shape[1]
        fh.write(struct.pack("<II", len(layers), c))
        for t in layers:
            fh.write(struct.pack("<I", t.shape[0]))
        fh.write(rep.cache.frame_index.astype("<i8").tobytes())
        fh.write(rep.token_kind.astype("<i8").tobytes())
        for t in layers:
            fh.write(t.detach().numpy().astype("<f4").tobytes())
        fh.write(rep.anchor_camera_tokens.detach().numpy().astype("<f4").tobytes())


def load_representation(path) -> SceneRepresentation:
    with open(path, "rb") as fh:
        if fh.read(8) != REPRESENTATION_MAGIC:
            raise ValueError(f"{path} is not a representation file")
        (fingerprint,) = struct.unpack("<Q", fh.read(8))
        (scale,) = struct.unpack("<d", fh.read(8))
        (n_anchor,) = struct.unpack("<I", fh.read(4))
        frame_ids = [struct.unpack("<q", fh.read(8))[0] for _ in range(n_anchor)]
        n_layers, c = struct.unpack("<II", fh.read(8))
        counts = [struct.unpack("<I", fh.read(4))[0] for _ in range(n_layers)]
        m = counts[0]
        frame_index = np.frombuffer(fh.read(8 * m), dtype="<i8").copy()
        token_kind = np.frombuffer(fh.read(8 * m), dtype="<i8").copy()
        layers = []
        for count in counts:
            arr = np.frombuffer(fh.read(4 * count * c), dtype="<f4").reshape(count, c)
            layers.append(torch.from_numpy(arr.copy()))
        cam = np.frombuffer(fh.read(4 * n_anchor * c), dtype="<f4").reshape(n_anchor, c)
        return SceneRepresentation(
            cache=RepresentationCache(layers, frame_index),
            token_kind=token_kind,
            anchor_camera_tokens=torch.from_numpy(cam.copy()),
            anchor_frame_ids=frame_ids,
            scale=scale,
            fingerprint=fingerprint,
        )
