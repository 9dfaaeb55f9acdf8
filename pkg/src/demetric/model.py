"""The decoupled embedding network.

Per scale: a front conv stack encodes the input once, J channel
attention branches reweight it, a shared rear conv stack encodes each
branch, and a bias-free linear learner maps the pooled descriptor to
that branch's embedding slice.  Between scales, the random-walk object
attention turns the rear stack's response maps into a crop-and-zoom of
the current input, so each subsequent scale looks closer at the
salient region.  The crop coordinates are non-differentiable: each
scale's input is a constant as far as the graph is concerned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cam import AdversaryNet, CamParams, cam_forward, cam_gates, init_adversary, init_cam
from .errors import DegenerateVectorError, DimensionError, FormatError, ParameterError
from .oam import AttentionProposal, build_weight_matrix, crop_and_zoom, crop_box, fuse_proposals, propagate
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DEML1"

ConvSpec = tuple[int, int, int]  # (in_channels, out_channels, stride)


@dataclass(frozen=True)
class BackboneConfig:
    """Conv stage specs for the front (FNet) and rear (GNet) stacks.

    All stages are 3x3 / zero padding 1; the front stack's output
    channel count is what the channel-attention gates see.
    """

    fnet: tuple[ConvSpec, ...] = ((1, 16, 2), (16, 32, 2))
    gnet: tuple[ConvSpec, ...] = ((32, 32, 1), (32, 48, 2))

    def __post_init__(self):
        chain = self.fnet + self.gnet
        for (_, out_c, _), (in_c, _, _) in zip(chain[:-1], chain[1:]):
            if out_c != in_c:
                raise ParameterError(f"conv stages do not chain: {chain}")
        for _, _, stride in chain:
            if stride not in (1, 2):
                raise ParameterError("conv stride must be 1 or 2")

    @property
    def input_channels(self) -> int:
        return self.fnet[0][0]

    @property
    def cam_channels(self) -> int:
        return self.fnet[-1][1]

    @property
    def descriptor_dim(self) -> int:
        return self.gnet[-1][1]


@dataclass(frozen=True)
class ModelConfig:
    """Decoupling layout: I scales, J branches per scale, d total dims."""

    I: int = 1
    J: int = 1
    d: int = 512
    share_fnet_across_scales: bool = True
    use_cam: bool = True
    walk_steps: int = 10

    def __post_init__(self):
        if self.I < 1 or self.J < 1:
            raise ParameterError(f"need I >= 1 and J >= 1, got I={self.I}, J={self.J}")
        if self.ca_dim < 4:
            raise ParameterError(
                f"per-branch dim floor(d/(I*J)) = {self.ca_dim} is below the minimum of 4")

    @property
    def ca_dim(self) -> int:
        return self.d // (self.I * self.J)

    @property
    def holistic_dim(self) -> int:
        return self.I * self.J * self.ca_dim


class LearnerBank:
    """Embeddings of all I*J branch learners, i-major / j-minor."""

    def __init__(self, scales: int, branches: int, embeddings: list[Tensor]):
        if len(embeddings) != scales * branches:
            raise DimensionError(
                f"bank needs {scales * branches} embeddings, got {len(embeddings)}")
        rows = {e.data.shape[0] for e in embeddings}
        if len(rows) != 1:
            raise DimensionError(f"inconsistent batch sizes in bank: {sorted(rows)}")
        self.scales = scales
        self.branches = branches
        self.embeddings = embeddings

    @property
    def n_learners(self) -> int:
        return self.scales * self.branches

    @property
    def batch_size(self) -> int:
        return self.embeddings[0].data.shape[0]

    def get(self, i: int, j: int) -> Tensor:
        return self.embeddings[i * self.branches + j]

    def scale_slice(self, i: int) -> list[Tensor]:
        return self.embeddings[i * self.branches:(i + 1) * self.branches]


def _normalized_rows(data: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(data, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateVectorError("embedding row with (near-)zero norm")
    return data / norms[:, None]


class DecoupledNet:
    """Parameters and forward passes of the full multi-scale model."""

    def __init__(self, config: ModelConfig, backbone: BackboneConfig | None = None,
                 seed: int = 0):
        self.config = config
        self.backbone = backbone if backbone is not None else BackboneConfig()
        rng = np.random.default_rng(seed)
        n_stacks = 1 if config.share_fnet_across_scales else config.I
        self.fnet = [self._init_stack(self.backbone.fnet, rng) for _ in range(n_stacks)]
        self.gnet = [self._init_stack(self.backbone.gnet, rng) for _ in range(n_stacks)]
        c = self.backbone.cam_channels
        self.cams: list[list[CamParams]] | None = None
        if config.use_cam:
            self.cams = [[init_cam(c, rng) for _ in range(config.J)] for _ in range(config.I)]
        d1 = self.backbone.descriptor_dim
        scale = 1.0 / np.sqrt(d1)
        self.learners = [
            [Tensor(rng.normal(0.0, scale, size=(config.ca_dim, d1)), requires_grad=True)
             for _ in range(config.J)]
            for _ in range(config.I)
        ]
        self.adversaries: list[AdversaryNet] | None = None
        if config.J >= 2:
            self.adversaries = [init_adversary(config.ca_dim, rng) for _ in range(config.I)]

    @staticmethod
    def _init_stack(specs: tuple[ConvSpec, ...], rng: np.random.Generator) -> list[Tensor]:
        kernels = []
        for in_c, out_c, _ in specs:
            scale = np.sqrt(2.0 / (in_c * 9))
            kernels.append(Tensor(rng.normal(0.0, scale, size=(out_c, in_c, 3, 3)),
                                  requires_grad=True))
        return kernels

    # parameter access ----------------------------------------------------

    def _stack_index(self, i: int) -> int:
        return 0 if self.config.share_fnet_across_scales else i

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for s, stack in enumerate(self.fnet):
            for k, kern in enumerate(stack):
                params[f"fnet.{s}.{k}"] = kern
        for s, stack in enumerate(self.gnet):
            for k, kern in enumerate(stack):
                params[f"gnet.{s}.{k}"] = kern
        if self.cams is not None:
            for i, row in enumerate(self.cams):
                for j, cam in enumerate(row):
                    params[f"cam.{i}.{j}.w1"] = cam.w1
                    params[f"cam.{i}.{j}.w2"] = cam.w2
        for i, row in enumerate(self.learners):
            for j, w in enumerate(row):
                params[f"learner.{i}.{j}"] = w
        if self.adversaries is not None:
            for i, adv in enumerate(self.adversaries):
                params[f"adv.{i}.a1"] = adv.a1
                params[f"adv.{i}.a2"] = adv.a2
        return params

    def learner_weight_list(self) -> list[Tensor]:
        return [w for row in self.learners for w in row]

    def backbone_parameters(self) -> list[Tensor]:
        out = [k for stack in self.fnet for k in stack]
        out += [k for stack in self.gnet for k in stack]
        if self.cams is not None:
            out += [t for row in self.cams for cam in row for t in (cam.w1, cam.w2)]
        if self.adversaries is not None:
            out += [t for adv in self.adversaries for t in (adv.a1, adv.a2)]
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # forward passes ------------------------------------------------------

    @staticmethod
    def _run_stack(x: Tensor, kernels: list[Tensor], specs: tuple[ConvSpec, ...],
                   collect: bool = False):
        outs = []
        for kern, (_, _, stride) in zip(kernels, specs):
            x = T.relu(T.conv2d(x, kern, stride))
            if collect:
                outs.append(x)
        return (x, outs) if collect else x

    def forward_scale(self, x: Tensor, i: int) -> tuple[list[Tensor], list[np.ndarray]]:
        """Embed one scale: J branch embeddings plus the response maps
        (branch-averaged, last two rear stages) that feed the object
        attention for the next scale."""
        s = self._stack_index(i)
        u = self._run_stack(x, self.fnet[s], self.backbone.fnet)
        embeddings = []
        map_sums: list[np.ndarray] | None = None
        for j in range(self.config.J):
            cap = cam_forward(u, self.cams[i][j]) if self.cams is not None else u
            g, stage_outs = self._run_stack(cap, self.gnet[s], self.backbone.gnet, collect=True)
            pooled = T.spatial_avg_pool(g)
            embeddings.append(T.matmul(pooled, T.transpose(self.learners[i][j])))
            maps = [o.data for o in stage_outs[-2:]]
            if map_sums is None:
                map_sums = [m.copy() for m in maps]
            else:
                for acc, m in zip(map_sums, maps):
                    acc += m
        oam_maps = [m / self.config.J for m in map_sums]
        return embeddings, oam_maps

    def _next_scale_input(self, x: Tensor, oam_maps: list[np.ndarray],
                          record: list | None = None) -> Tensor:
        n, _, h, w = x.data.shape
        out = np.empty_like(x.data)
        for idx in range(n):
            proposals = [propagate(build_weight_matrix(m[idx]), self.config.walk_steps)
                         for m in oam_maps]
            fused = fuse_proposals(proposals, h, w)
            box = crop_box(fused, h, w)
            out[idx] = crop_and_zoom(x.data[idx], box)
            if record is not None:
                record.append((fused, box))
        return Tensor(out)

    def forward_all_scales(self, images: np.ndarray) -> LearnerBank:
        """Run every scale on a (N, C, H, W) batch and collect the bank."""
        x = Tensor(np.asarray(images, dtype=np.float64))
        if x.data.ndim != 4:
            raise DimensionError(f"expected (N, C, H, W) images, got shape {x.data.shape}")
        all_embeddings: list[Tensor] = []
        for i in range(self.config.I):
            embeddings, oam_maps = self.forward_scale(x, i)
            all_embeddings.extend(embeddings)
            if i + 1 < self.config.I:
                x = self._next_scale_input(x, oam_maps)
        return LearnerBank(self.config.I, self.config.J, all_embeddings)

    def attend(self, image: np.ndarray) -> dict:
        """Diagnostics for one image: per-scale inputs, fused proposals,
        crop boxes, and per-branch gate vectors."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img[None]
        x = Tensor(img)
        info: dict = {"scale_inputs": [], "proposals": [], "boxes": [], "gates": []}
        for i in range(self.config.I):
            info["scale_inputs"].append(x.data[0].copy())
            s = self._stack_index(i)
            u = self._run_stack(x, self.fnet[s], self.backbone.fnet)
            if self.cams is not None:
                info["gates"].append([cam_gates(u, cam).data[0].copy() for cam in self.cams[i]])
            else:
                info["gates"].append([])
            _, oam_maps = self.forward_scale(x, i)
            if i + 1 < self.config.I:
                record: list[tuple[AttentionProposal, object]] = []
                x = self._next_scale_input(x, oam_maps, record=record)
                info["proposals"].append(record[0][0])
                info["boxes"].append(record[0][1])
            else:
                n, _, h, w = x.data.shape
                proposals = [propagate(build_weight_matrix(m[0]), self.config.walk_steps)
                             for m in oam_maps]
                info["proposals"].append(fuse_proposals(proposals, h, w))
        return info

    # embeddings for retrieval ---------------------------------------------

    def holistic_embed(self, bank: LearnerBank) -> np.ndarray:
        """Concatenate the per-learner L2-normalized embeddings (i-major)."""
        return np.concatenate([_normalized_rows(e.data) for e in bank.embeddings], axis=1)

    def root_embed(self, bank: LearnerBank, i: int) -> np.ndarray:
        """The holistic slice of one scale's root learner."""
        return np.concatenate([_normalized_rows(e.data) for e in bank.scale_slice(i)], axis=1)

    def embed_images(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Holistic embeddings of a (N, C, H, W) stack, in eval batches."""
        images = np.asarray(images, dtype=np.float64)
        chunks = []
        for lo in range(0, images.shape[0], batch_size):
            bank = self.forward_all_scales(images[lo:lo + batch_size])
            chunks.append(self.holistic_embed(bank))
        return np.concatenate(chunks, axis=0)

    # checkpoint i/o --------------------------------------------------------

    def save(self, path) -> None:
        params = self.named_parameters()
        cfg = self.config
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            header = [cfg.I, cfg.J, cfg.d, int(cfg.share_fnet_across_scales),
                      int(cfg.use_cam), cfg.walk_steps]
            header.append(len(self.backbone.fnet))
            for spec in self.backbone.fnet:
                header.extend(spec)
            header.append(len(self.backbone.gnet))
            for spec in self.backbone.gnet:
                header.extend(spec)
            header.append(len(params))
            f.write(struct.pack(f"<{len(header)}i", *header))
            for name, p in params.items():
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", p.data.ndim))
                f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                f.write(p.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DecoupledNet":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:5] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {blob[:5]!r} at byte 0")
        off = 5

        def read_ints(count: int) -> tuple[int, ...]:
            nonlocal off
            vals = struct.unpack_from(f"<{count}i", blob, off)
            off += 4 * count
            return vals

        i_scales, j_branches, d, share, use_cam, walk_steps = read_ints(6)
        (n_fnet,) = read_ints(1)
        fnet = tuple(read_ints(3) for _ in range(n_fnet))
        (n_gnet,) = read_ints(1)
        gnet = tuple(read_ints(3) for _ in range(n_gnet))
        (n_params,) = read_ints(1)
        config = ModelConfig(I=i_scales, J=j_branches, d=d,
                             share_fnet_across_scales=bool(share),
                             use_cam=bool(use_cam), walk_steps=walk_steps)
        model = cls(config, BackboneConfig(fnet=fnet, gnet=gnet))
        params = model.named_parameters()
        if n_params != len(params):
            raise FormatError(f"checkpoint holds {n_params} params, model needs {len(params)}")
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if name not in params:
                raise FormatError(f"unknown parameter {name!r} at byte {off}")
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            target = params[name]
            if tuple(shape) != target.data.shape:
                raise FormatError(f"parameter {name!r} has shape {shape}, expected {target.data.shape}")
            target.data = values.reshape(shape).astype(np.float64)
        if off != len(blob):
            raise FormatError(f"trailing bytes after byte {off}")
        return model
