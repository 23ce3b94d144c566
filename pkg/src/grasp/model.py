"""The occlusion-aware token model.

Pipeline per instance (image plus a visible-mask estimate):

1.  encode: the image is split into patches; each patch vector runs
    through four frozen random-init MLP blocks whose outputs are
    concatenated and linearly projected to the working width.  Frozen
    means frozen: those blocks never receive gradient.
2.  vm_encode_fuse: the visible mask becomes per-patch tokens
    (occupancy fraction plus normalized patch-center coordinates
    through a small MLP) and is fused into the image tokens by
    cross-attention, scaled by a learnable scalar that starts at zero,
    so an untrained model ignores the mask entirely.
3.  spm: the fused tokens query a bank of learnable shape prototypes
    with multi-head cross-attention; the output is a soft mixture of
    prototypes (never a hard selection).  The residual between that
    mixture and the fused tokens is the candidate correction.
4.  gate: each token's correction is scaled by a sigmoid gate over the
    token's pooled, diagonal-normalized signed distance to the visible
    mask.  The gate has exactly two trainable scalars: a slope and a
    bias.  Deeply occluded tokens (positive distance) can therefore
    receive a stronger prior than tokens squarely on visible evidence.
5.  decode: a shared per-token trunk splits into an occluded branch
    and an amodal branch.  The occluded head reads the occluded branch
    only; the amodal head reads both branches through a fusion layer,
    so occlusion evidence flows into amodal completion but never the
    reverse.

An evaluation-time gate override can pin the gate to a constant; 0 and
1 are applied algebraically (identically recovering the fused tokens
or the prototype mixture) so ablations are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, IntegrityError
from .geometry import BinaryMask, pool_to_grid, sdf
from .seeding import derive_seed
from .tensor import AttentionParams, Tensor

CHECKPOINT_FORMAT = "grasp-ckpt-v1"


@dataclass(frozen=True)
class GraspConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    n_prototypes: int = 32
    vm_hidden: int = 32
    decoder_hidden: int = 64
    sdf_query_mod: bool = False
    gate_override: Optional[float] = None

    def __post_init__(self):
        if self.image_size < self.patch or self.image_size % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide image size {self.image_size}"
            )
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"head count {self.heads} does not divide width {self.dim}")
        if self.n_prototypes < 1:
            raise ConfigError("prototype bank must be nonempty")
        if self.vm_hidden < 1 or self.decoder_hidden < 1:
            raise ConfigError("hidden widths must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch": self.patch,
            "dim": self.dim,
            "heads": self.heads,
            "n_prototypes": self.n_prototypes,
            "vm_hidden": self.vm_hidden,
            "decoder_hidden": self.decoder_hidden,
            "sdf_query_mod": self.sdf_query_mod,
            "gate_override": self.gate_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspConfig":
        return cls(**d)


N_FROZEN_BLOCKS = 4


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, for losses and analysis."""

    tokens: Tensor  # encoded image tokens
    mask_tokens: Tensor  # encoded visible-mask tokens
    fused: Tensor  # image tokens after mask fusion
    prior: Tensor  # prototype mixture
    residual: Tensor  # prior - fused
    sdf_tokens: np.ndarray  # pooled normalized signed distance per token
    gate: Tensor  # per-token gate in (0, 1), or the override constant
    injected: Tensor  # fused + gate * residual
    occ_branch: Tensor
    amodal_branch: Tensor
    proto_attn: np.ndarray  # (heads, tokens, n_prototypes)
    logits_occ: Tensor  # (H, W)
    logits_amodal: Tensor  # (H, W)


def _linear(rng, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    w = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return w, b


class GraspParams:
    """All parameter groups, keyed for reporting and serialization."""

    def __init__(self, config: GraspConfig, seed: int):
        self.seed = int(seed)
        pd, dim = config.patch_dim, config.dim

        frozen_rng = np.random.default_rng(derive_seed(seed, "frozen-encoder"))
        self.frozen = {}
        for i in range(N_FROZEN_BLOCKS):
            w = frozen_rng.normal(0.0, 1.0 / np.sqrt(pd), (pd, pd))
            b = frozen_rng.normal(0.0, 0.1, pd)
            self.frozen[f"block{i}_w"] = Tensor(w)
            self.frozen[f"block{i}_b"] = Tensor(b)

        def rng(tag):
            return np.random.default_rng(derive_seed(seed, tag))

        r = rng("projection")
        pw, pb = _linear(r, N_FROZEN_BLOCKS * pd, dim)
        projection = {"w": pw, "b": pb}

        r = rng("vm-encoder")
        w1, b1 = _linear(r, 3, config.vm_hidden)
        w2, b2 = _linear(r, config.vm_hidden, dim)
        vm_encoder = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

        vm_attention = dict(AttentionParams.init(dim, rng("vm-attention")).tensors())
        vm_attention["gamma"] = Tensor(np.zeros(()), requires_grad=True)

        prototypes = {
            "bank": Tensor(rng("prototypes").normal(0.0, 1.0, (config.n_prototypes, dim)),
                           requires_grad=True)
        }

        spm_attention = dict(AttentionParams.init(dim, rng("spm-attention")).tensors())

        gate = {
            "alpha": Tensor(np.zeros(()), requires_grad=True),
            "beta": Tensor(np.zeros(()), requires_grad=True),
        }

        sdf_query = {"direction": Tensor(np.zeros(dim), requires_grad=True)}

        r = rng("decoder")
        hid = config.decoder_hidden
        tw1, tb1 = _linear(r, dim, hid)
        tw2, tb2 = _linear(r, hid, hid)
        ow, ob = _linear(r, hid, hid)
        aw, ab = _linear(r, hid, hid)
        fw, fb = _linear(r, 2 * hid, hid)
        how, hob = _linear(r, hid, config.patch_dim)
        haw, hab = _linear(r, hid, config.patch_dim)
        decoder = {
            "trunk_w1": tw1, "trunk_b1": tb1,
            "trunk_w2": tw2, "trunk_b2": tb2,
            "occ_w": ow, "occ_b": ob,
            "amodal_w": aw, "amodal_b": ab,
            "fuse_w": fw, "fuse_b": fb,
            "head_occ_w": how, "head_occ_b": hob,
            "head_amodal_w": haw, "head_amodal_b": hab,
        }

        self.groups: dict[str, dict[str, Tensor]] = {
            "projection": projection,
            "vm_encoder": vm_encoder,
            "vm_attention": vm_attention,
            "prototypes": prototypes,
            "spm_attention": spm_attention,
            "gate": gate,
            "sdf_query": sdf_query,
            "decoder": decoder,
        }

    def named_trainable(self):
        for group, tensors in self.groups.items():
            for name, t in tensors.items():
                yield group, name, t

    def trainable(self):
        return [t for _, _, t in self.named_trainable()]

    def named_all(self):
        for name, t in self.frozen.items():
            yield "frozen_encoder", name, t
        yield from self.named_trainable()


class GraspModel:
    def __init__(self, config: GraspConfig, seed: int = 0, params: GraspParams | None = None):
        self.config = config
        self.params = params if params is not None else GraspParams(config, seed)

    # -- stages ---------------------------------------------------------

    def encode(self, image: np.ndarray) -> Tensor:
        """Image -> (tokens, dim) through the frozen blocks and projection."""
        cfg = self.config
        if image.shape != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"image shape {image.shape} != configured {cfg.image_size}x{cfg.image_size}"
            )
        x = Tensor(T.patchify(image, cfg.patch))
        feats = []
        h = x
        for i in range(N_FROZEN_BLOCKS):
            w = self.params.frozen[f"block{i}_w"]
            b = self.params.frozen[f"block{i}_b"]
            h = T.tanh(T.add_rowvec(T.matmul(h, w), b))
            feats.append(h)
        stacked = T.concat(feats, axis=1)
        proj = self.params.groups["projection"]
        return T.add_rowvec(T.matmul(stacked, proj["w"]), proj["b"])

    def encode_mask_tokens(self, visible: BinaryMask) -> Tensor:
        """Visible mask -> (tokens, dim): occupancy and position through an MLP."""
        cfg = self.config
        occ = T.patchify(visible.a.astype(np.float64), cfg.patch).mean(axis=1)
        g = cfg.grid
        ty, tx = np.divmod(np.arange(cfg.tokens), g)
        feats = np.stack([occ, (ty + 0.5) / g, (tx + 0.5) / g], axis=1)
        p = self.params.groups["vm_encoder"]
        h = T.relu(T.add_rowvec(T.matmul(Tensor(feats), p["w1"]), p["b1"]))
        return T.add_rowvec(T.matmul(h, p["w2"]), p["b2"])

    def vm_encode_fuse(self, tokens: Tensor, visible: BinaryMask):
        """Fuse mask evidence into image tokens, scaled by the zero-init scalar."""
        mask_tokens = self.encode_mask_tokens(visible)
        p = self.params.groups["vm_attention"]
        attn_params = AttentionParams(p["wq"], p["wk"], p["wv"], p["wo"])
        mixed, _ = T.multihead_cross_attention(
            tokens, mask_tokens, mask_tokens, attn_params, self.config.heads
        )
        fused = T.add(tokens, T.mul(p["gamma"], mixed))
        return fused, mask_tokens

    def sdf_tokens(self, visible: BinaryMask) -> np.ndarray:
        """Pooled, diagonal-normalized signed distance per token."""
        cfg = self.config
        if visible.shape != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"mask shape {visible.shape} != configured {cfg.image_size}x{cfg.image_size}"
            )
        return pool_to_grid(sdf(visible), cfg.grid, cfg.grid)

    def spm(self, fused: Tensor, sdf_tok: np.ndarray):
        """Query the prototype bank; returns (prior, residual, attention)."""
        cfg = self.config
        queries = fused
        if cfg.sdf_query_mod:
            d = self.params.groups["sdf_query"]["direction"]
            ray = T.add_rowvec(Tensor(np.zeros((cfg.tokens, cfg.dim))), d)
            queries = T.add(fused, T.scale_rows(ray, Tensor(sdf_tok)))
        p = self.params.groups["spm_attention"]
        bank = self.params.groups["prototypes"]["bank"]
        attn_params = AttentionParams(p["wq"], p["wk"], p["wv"], p["wo"])
        prior, attn = T.multihead_cross_attention(queries, bank, bank, attn_params, cfg.heads)
        residual = T.sub(prior, fused)
        return prior, residual, attn

    def gate(self, sdf_tok: np.ndarray) -> Tensor:
        """Per-token sigmoid gate over normalized signed distance."""
        g = self.params.groups["gate"]
        return T.sigmoid(T.add(T.mul(g["alpha"], Tensor(sdf_tok)), g["beta"]))

    def inject(self, fused: Tensor, prior: Tensor, residual: Tensor, gate: Tensor,
               gate_override: Optional[float]) -> tuple[Tensor, Tensor]:
        """Blend the prototype residual into the fused tokens.

        Overrides 0 and 1 short-circuit to their algebraic identities
        (fused tokens and prior, respectively), so ablations compare
        bit-identical quantities rather than reconstructed ones.
        """
        if gate_override is not None:
            c = float(gate_override)
            gate = Tensor(np.full(fused.shape[0], c))
            if c == 0.0:
                return fused, gate
            if c == 1.0:
                return prior, gate
        return T.add(fused, T.scale_rows(residual, gate)), gate

    def decode_branches(self, injected: Tensor):
        """Shared trunk, then the occluded and amodal branch features."""
        d = self.params.groups["decoder"]
        h = T.relu(T.add_rowvec(T.matmul(injected, d["trunk_w1"]), d["trunk_b1"]))
        h = T.relu(T.add_rowvec(T.matmul(h, d["trunk_w2"]), d["trunk_b2"]))
        occ = T.relu(T.add_rowvec(T.matmul(h, d["occ_w"]), d["occ_b"]))
        amodal = T.relu(T.add_rowvec(T.matmul(h, d["amodal_w"]), d["amodal_b"]))
        return occ, amodal

    def heads_from_branches(self, occ_branch: Tensor, amodal_branch: Tensor):
        """Token logits -> full-resolution logit images.

        The occluded head sees the occluded branch only.  The amodal
        head sees [amodal; occluded] through the fusion layer, so the
        information flow is strictly occluded -> amodal.
        """
        cfg = self.config
        d = self.params.groups["decoder"]
        occ_tok = T.add_rowvec(T.matmul(occ_branch, d["head_occ_w"]), d["head_occ_b"])
        fused = T.relu(
            T.add_rowvec(
                T.matmul(T.concat([amodal_branch, occ_branch], axis=1), d["fuse_w"]),
                d["fuse_b"],
            )
        )
        amo_tok = T.add_rowvec(T.matmul(fused, d["head_amodal_w"]), d["head_amodal_b"])
        g, p = cfg.grid, cfg.patch
        return (
            T.depatchify(occ_tok, g, g, p),
            T.depatchify(amo_tok, g, g, p),
        )

    def forward(self, image: np.ndarray, visible: BinaryMask,
                gate_override: Optional[float] = "config") -> ForwardTrace:
        """Run the full pipeline; override defaults to the configured one."""
        if gate_override == "config":
            gate_override = self.config.gate_override
        sdf_tok = self.sdf_tokens(visible)
        tokens = self.encode(image)
        fused, mask_tokens = self.vm_encode_fuse(tokens, visible)
        prior, residual, attn = self.spm(fused, sdf_tok)
        gate = self.gate(sdf_tok)
        injected, effective_gate = self.inject(fused, prior, residual, gate, gate_override)
        occ_branch, amodal_branch = self.decode_branches(injected)
        logits_occ, logits_amodal = self.heads_from_branches(occ_branch, amodal_branch)
        return ForwardTrace(
            tokens=tokens,
            mask_tokens=mask_tokens,
            fused=fused,
            prior=prior,
            residual=residual,
            sdf_tokens=sdf_tok,
            gate=effective_gate,
            injected=injected,
            occ_branch=occ_branch,
            amodal_branch=amodal_branch,
            proto_attn=attn.data.copy(),
            logits_occ=logits_occ,
            logits_amodal=logits_amodal,
        )

    # -- reporting -------------------------------------------------------

    def count_params(self) -> dict[str, int]:
        """Trainable scalars per group, plus the frozen encoder for reference."""
        counts = {"frozen_encoder (not trained)": sum(t.size for t in self.params.frozen.values())}
        total = 0
        for group, tensors in self.params.groups.items():
            n = sum(t.size for t in tensors.values())
            counts[group] = n
            total += n
        counts["total_trainable"] = total
        return counts

    # -- checkpoints -------------------------------------------------------

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        save_checkpoint(path, self, step=step, extra=extra)


def save_checkpoint(path, model: GraspModel, step: int = 0, extra: dict | None = None) -> None:
    """JSON header line, then raw little-endian float64 blocks in header order."""
    entries = []
    blobs = []
    for group, name, t in model.params.named_all():
        blob = t.data.astype("<f8").tobytes()
        entries.append(
            {"group": group, "name": name, "shape": list(t.data.shape), "bytes": len(blob)}
        )
        blobs.append(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.params.seed,
        "step": int(step),
        "params": entries,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[GraspModel, int]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: malformed checkpoint header") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise IntegrityError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        config = GraspConfig.from_dict(header["config"])
        model = GraspModel(config, seed=header["seed"])
        lookup = {(g, n): t for g, n, t in model.params.named_all()}
        seen = set()
        for entry in header["params"]:
            key = (entry["group"], entry["name"])
            if key not in lookup:
                raise IntegrityError(f"{path}: unexpected parameter {key}")
            t = lookup[key]
            if tuple(entry["shape"]) != t.data.shape:
                raise IntegrityError(
                    f"{path}: shape {entry['shape']} for {key} != model {t.data.shape}"
                )
            if entry["bytes"] != t.data.size * 8:
                raise IntegrityError(f"{path}: block size {entry['bytes']} wrong for {key}")
            blob = fh.read(entry["bytes"])
            if len(blob) != entry["bytes"]:
                raise IntegrityError(f"{path}: truncated block for {key}")
            arr = np.frombuffer(blob, dtype="<f8").reshape(entry["shape"])
            writeable = t.data.flags.writeable
            t.data.flags.writeable = True
            t.data[...] = arr
            t.data.flags.writeable = writeable
            seen.add(key)
        missing = set(lookup) - seen
        if missing:
            raise IntegrityError(f"{path}: checkpoint missing parameters {sorted(missing)}")
    return model, int(header["step"])
