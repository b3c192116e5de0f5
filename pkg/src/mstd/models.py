"""Networks: unimodal/multimodal classifiers, MaskNet, GateNet, teacher registry.

All encoders are MLPs. A model's forward takes the full list of modality
inputs and reads the ones it consumes, so every model in a run is called
uniformly. Intermediate features are exposed at named tap points ("h0",
"h1" on unimodal hidden layers, "f0", "f1" on post-fusion layers) where a
MaskNet can be inserted.

Teacher numbering: teacher ids j run 1..N over the registry, multimodal
teachers first, then unimodal modalities in ascending index order with the
target modality skipped. source_modality(j) resolves j to its modality by
cumulative block lookup.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    """A weight/bias pair; init is uniform +-1/sqrt(fan_in), weight drawn first."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.w = Parameter(uniform_init(rng, d_in, (d_in, d_out)), name=f"{name}/w")
        self.b = Parameter(uniform_init(rng, d_in, (d_out,)), name=f"{name}/b")

    @classmethod
    def from_arrays(cls, w: np.ndarray, b: np.ndarray, name: str) -> "Linear":
        obj = cls.__new__(cls)
        obj.w = Parameter(w, name=f"{name}/w")
        obj.b = Parameter(b, name=f"{name}/b")
        return obj

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class _Module:
    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self.parameters()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(
                f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ConfigError(
                    f"state shape mismatch for {name}: {arr.shape} vs {p.shape}"
                )
            # Always copy: optimizers update parameter arrays in place, and a
            # loaded state must never share memory with the caller's snapshot.
            p.data = np.array(arr, dtype=np.float32, order="C")


class ModalityModel(_Module):
    """MLP classifier for one modality, or the fusion model when index 0.

    Unimodal (modality_index >= 1): input -> hidden stack with ReLU, tap
    after each hidden activation -> linear head.
    Multimodal (modality_index == 0): per-modality encoder stacks, last
    activations concatenated, fusion stack with taps, linear head. Taps
    exist only after fusion layers: masks on this model always see the
    joined representation.
    """

    def __init__(self, modality_index: int, prefix: str):
        self.modality_index = modality_index
        self.prefix = prefix
        self.encoders: list[list[Linear]] = []  # multimodal only
        self.hidden: list[Linear] = []  # unimodal hidden or fusion stack
        self.head: Linear | None = None
        self._tap_prefix = "f" if modality_index == 0 else "h"
        self._tap_dims: list[int] = []

    # -- construction ------------------------------------------------------

    @classmethod
    def build_unimodal(
        cls,
        modality_index: int,
        modality_dim: int,
        hidden: list[int],
        classes: int,
        rng: np.random.Generator,
    ) -> "ModalityModel":
        if modality_index < 1:
            raise ConfigError(f"unimodal modality_index must be >= 1, got {modality_index}")
        if not hidden:
            raise ConfigError("hidden layer list must be non-empty")
        m = cls(modality_index, prefix=f"m{modality_index}")
        d = modality_dim
        for i, h in enumerate(hidden):
            m.hidden.append(Linear(d, h, rng, f"{m.prefix}/hidden/{i}"))
            m._tap_dims.append(h)
            d = h
        m.head = Linear(d, classes, rng, f"{m.prefix}/head")
        return m

    @classmethod
    def build_multimodal(
        cls,
        modality_dims: list[int],
        encoder_hidden: list[list[int]],
        fusion_hidden: list[int],
        classes: int,
        rng: np.random.Generator,
    ) -> "ModalityModel":
        """encoder_hidden holds one hidden-width list per modality, so the
        per-modality encoders may end at different widths; their outputs are
        concatenated into the fusion stack."""
        if len(modality_dims) < 2:
            raise ConfigError(f"fusion model needs >= 2 modalities, got {len(modality_dims)}")
        if len(encoder_hidden) != len(modality_dims):
            raise ConfigError(
                f"{len(encoder_hidden)} encoder stacks for {len(modality_dims)} modalities"
            )
        if not fusion_hidden:
            raise ConfigError("fusion layer list must be non-empty")
        m = cls(0, prefix="m0")
        fusion_in = 0
        for mod, d in enumerate(modality_dims):
            stack = []
            for i, h in enumerate(encoder_hidden[mod]):
                stack.append(Linear(d, h, rng, f"{m.prefix}/enc/{mod}/{i}"))
                d = h
            m.encoders.append(stack)
            fusion_in += d
        d = fusion_in
        for i, h in enumerate(fusion_hidden):
            m.hidden.append(Linear(d, h, rng, f"{m.prefix}/fusion/{i}"))
            m._tap_dims.append(h)
            d = h
        m.head = Linear(d, classes, rng, f"{m.prefix}/head")
        return m

    # -- forward -----------------------------------------------------------

    def forward(self, inputs: list[Tensor], hooks: dict | None = None) -> Tensor:
        if self.modality_index == 0:
            parts = []
            for mod, stack in enumerate(self.encoders):
                h = inputs[mod]
                for layer in stack:
                    h = T.relu(layer(h))
                parts.append(h)
            h = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        else:
            h = inputs[self.modality_index - 1]
        for i, layer in enumerate(self.hidden):
            h = T.relu(layer(h))
            if hooks:
                tap = f"{self._tap_prefix}{i}"
                if tap in hooks:
                    h = hooks[tap](h)
        return self.head(h)

    def __call__(self, inputs: list[Tensor], hooks: dict | None = None) -> Tensor:
        return self.forward(inputs, hooks)

    # -- taps ---------------------------------------------------------------

    def tap_ids(self) -> list[str]:
        return [f"{self._tap_prefix}{i}" for i in range(len(self.hidden))]

    def default_taps(self) -> list[str]:
        """Middle and final hidden (penultimate network) layers, deduplicated."""
        last = len(self.hidden) - 1
        mid = last // 2
        return [f"{self._tap_prefix}{i}" for i in sorted({mid, last})]

    def tap_dim(self, tap: str) -> int:
        if tap not in self.tap_ids():
            raise ConfigError(f"unknown tap {tap!r}; model has {self.tap_ids()}")
        return self._tap_dims[int(tap[1:])]

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for stack in self.encoders:
            for layer in stack:
                out.extend(layer.parameters())
        for layer in self.hidden:
            out.extend(layer.parameters())
        out.extend(self.head.parameters())
        return out

    # -- reconstruction from a saved state -----------------------------------

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], modality_index: int) -> "ModalityModel":
        """Rebuild a model purely from its parameter arrays.

        Structure is inferred from the name paths, so a checkpoint is
        self-describing given its modality index.
        """
        m = cls(modality_index, prefix=f"m{modality_index}")
        prefix = f"m{modality_index}/"
        named = {}
        for k, v in state.items():
            if not k.startswith(prefix):
                raise ConfigError(f"parameter {k!r} does not belong to {prefix!r}")
            named[k[len(prefix):]] = v

        def layer_indices(kind: str) -> list[int]:
            idx = set()
            for k in named:
                parts = k.split("/")
                if parts[0] == kind:
                    idx.add(int(parts[1]))
            return sorted(idx)

        if modality_index == 0:
            mods = sorted({int(k.split("/")[1]) for k in named if k.startswith("enc/")})
            for mod in mods:
                stack = []
                layers = sorted(
                    {int(k.split("/")[2]) for k in named if k.startswith(f"enc/{mod}/")}
                )
                for i in layers:
                    base = f"{m.prefix}/enc/{mod}/{i}"
                    stack.append(
                        Linear.from_arrays(named[f"enc/{mod}/{i}/w"], named[f"enc/{mod}/{i}/b"], base)
                    )
                m.encoders.append(stack)
            kind = "fusion"
        else:
            kind = "hidden"
        for i in layer_indices(kind):
            base = f"{m.prefix}/{kind}/{i}"
            layer = Linear.from_arrays(named[f"{kind}/{i}/w"], named[f"{kind}/{i}/b"], base)
            m.hidden.append(layer)
            m._tap_dims.append(layer.w.shape[1])
        m.head = Linear.from_arrays(named["head/w"], named["head/b"], f"{m.prefix}/head")
        m.load_state(state)  # validates nothing is missing or extra
        return m


class MaskNet(_Module):
    """Soft feature mask: projector, self-attention over feature tokens, sigmoid.

    A d_m feature vector is projected to d_m tokens of width d_h, mixed by
    multi-head self-attention, and squashed to one logit per token; the
    sigmoid of those logits is the mask, applied to the input by Hadamard
    product. Mask entries live strictly inside (0,1), so the module can
    attenuate but never erase or amplify a feature.
    """

    def __init__(
        self,
        d_m: int,
        d_h: int,
        heads: int,
        rng: np.random.Generator,
        name: str,
    ):
        if d_h % heads != 0:
            raise ConfigError(f"masknet d_h {d_h} not divisible by heads {heads}")
        self.d_m, self.d_h, self.heads = d_m, d_h, heads
        self.name = name
        self.proj = Linear(d_m, d_m * d_h, rng, f"{name}/proj")
        self.attn = [
            Linear(d_h, d_h, rng, f"{name}/attn/{nm}") for nm in ("q", "k", "v", "o")
        ]
        self.out = Linear(d_h, 1, rng, f"{name}/out")

    def mask(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.d_m:
            raise ConfigError(
                f"masknet expects feature dim {self.d_m}, got {z.shape[-1]}"
            )
        batch = z.shape[0]
        tokens = T.reshape(self.proj(z), (batch, self.d_m, self.d_h))
        q, k, v, o = self.attn
        mixed = T.multi_head_self_attention(
            tokens, self.heads, q.w, q.b, k.w, k.b, v.w, v.b, o.w, o.b
        )
        logits = T.reshape(self.out(mixed), (batch, self.d_m))
        return T.sigmoid(logits)

    def __call__(self, z: Tensor) -> Tensor:
        return T.mul(z, self.mask(z))

    def parameters(self) -> list[Parameter]:
        out = self.proj.parameters()
        for layer in self.attn:
            out.extend(layer.parameters())
        out.extend(self.out.parameters())
        return out

    @classmethod
    def from_state(
        cls, state: dict[str, np.ndarray], name: str, heads: int = 3
    ) -> "MaskNet":
        proj_w = state[f"{name}/proj/w"]
        d_m = proj_w.shape[0]
        d_h = proj_w.shape[1] // d_m
        obj = cls.__new__(cls)
        obj.d_m, obj.d_h, obj.heads = d_m, d_h, heads
        obj.name = name
        obj.proj = Linear.from_arrays(proj_w, state[f"{name}/proj/b"], f"{name}/proj")
        obj.attn = [
            Linear.from_arrays(
                state[f"{name}/attn/{nm}/w"], state[f"{name}/attn/{nm}/b"], f"{name}/attn/{nm}"
            )
            for nm in ("q", "k", "v", "o")
        ]
        obj.out = Linear.from_arrays(state[f"{name}/out/w"], state[f"{name}/out/b"], f"{name}/out")
        obj.load_state(state)
        return obj


class SpecializedTeacher:
    """A frozen base model with one trainable MaskNet at a tap point."""

    def __init__(
        self,
        teacher_id: int,
        base: ModalityModel,
        tap: str,
        masknet: MaskNet,
        source_modality: int,
    ):
        self.teacher_id = teacher_id
        self.base = base
        self.tap = tap
        self.masknet = masknet
        self.source_modality = source_modality

    def forward(self, inputs: list[Tensor], mask_override: np.ndarray | None = None) -> Tensor:
        if mask_override is not None:
            hook = lambda z: T.mul(z, Tensor(mask_override))  # noqa: E731
        else:
            hook = self.masknet
        return self.base.forward(inputs, hooks={self.tap: hook})

    def __call__(self, inputs, mask_override=None):
        return self.forward(inputs, mask_override)

    def parameters(self) -> list[Parameter]:
        """Trainable surface: the MaskNet only (the base stays frozen)."""
        return self.masknet.parameters()


def specialize(
    base: ModalityModel,
    tap: str,
    d_h: int,
    heads: int,
    rng: np.random.Generator,
    teacher_id: int,
) -> SpecializedTeacher:
    d_m = base.tap_dim(tap)  # raises ConfigError on unknown tap
    base.freeze()
    masknet = MaskNet(d_m, d_h, heads, rng, name=f"mn{teacher_id}")
    return SpecializedTeacher(teacher_id, base, tap, masknet, base.modality_index)


class TeacherRegistry:
    """Ordered collection of specialized teachers for one target modality.

    Block order: multimodal teachers (modality 0) first, then unimodal
    modalities ascending, skipping the target. Within a block, tap order
    follows the model's tap list. N is the total teacher count.
    """

    def __init__(self, teachers: list[SpecializedTeacher], blocks: list[tuple[int, int]], target: int):
        self.teachers = teachers
        self.blocks = blocks  # (modality_index, teacher count) in registry order
        self.target = target

    @property
    def n(self) -> int:
        return len(self.teachers)

    @classmethod
    def build(
        cls,
        models: dict[int, ModalityModel],
        target: int,
        taps: dict[int, list[str]],
        d_h: int,
        heads: int,
        seed: int,
        rng_stream,
    ) -> "TeacherRegistry":
        """rng_stream(seed, name) supplies the per-teacher init streams."""
        from . import rng as rng_names

        if target == 0:
            raise ConfigError("target modality must be a unimodal index >= 1")
        order = [0] + sorted(i for i in models if i not in (0, target))
        teachers: list[SpecializedTeacher] = []
        blocks: list[tuple[int, int]] = []
        j = 0
        for mod in order:
            if mod not in models:
                continue
            mod_taps = taps.get(mod, [])
            if mod_taps:
                blocks.append((mod, len(mod_taps)))
            for tap in mod_taps:
                j += 1
                r = rng_stream(seed, rng_names.masknet_init(j))
                teachers.append(specialize(models[mod], tap, d_h, heads, r, j))
        if not teachers:
            raise ConfigError("teacher registry is empty: no taps configured")
        return cls(teachers, blocks, target)

    def source_modality(self, j: int) -> int:
        """Modality of teacher j (1-based) by cumulative block lookup."""
        if not 1 <= j <= self.n:
            raise ConfigError(f"teacher id {j} out of range 1..{self.n}")
        upper = 0
        for mod, count in self.blocks:
            upper += count
            if j <= upper:
                return mod
        raise ConfigError(f"teacher id {j} not covered by registry blocks")  # unreachable

    def __iter__(self):
        return iter(self.teachers)

    def __len__(self):
        return self.n


class GateNet(_Module):
    """Routing MLP: student logits -> softmax confidence over N teachers."""

    def __init__(
        self,
        classes: int,
        n_teachers: int,
        rng: np.random.Generator,
        hidden: int | None = None,
    ):
        if n_teachers < 2:
            raise ConfigError(f"gatenet needs >= 2 teachers, got {n_teachers}")
        self.n_teachers = n_teachers
        width = hidden if hidden is not None else 4 * n_teachers
        self.lin1 = Linear(classes, width, rng, "gate/0")
        self.lin2 = Linear(width, n_teachers, rng, "gate/1")

    def __call__(self, student_logits: Tensor) -> Tensor:
        h = T.relu(self.lin1(student_logits))
        return T.softmax(self.lin2(h))

    def parameters(self) -> list[Parameter]:
        return self.lin1.parameters() + self.lin2.parameters()

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "GateNet":
        obj = cls.__new__(cls)
        obj.lin1 = Linear.from_arrays(state["gate/0/w"], state["gate/0/b"], "gate/0")
        obj.lin2 = Linear.from_arrays(state["gate/1/w"], state["gate/1/b"], "gate/1")
        obj.n_teachers = obj.lin2.w.shape[1]
        obj.load_state(state)
        return obj


def topk_select(confidence_row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest confidences, descending; ties favor lower index."""
    c = np.asarray(confidence_row)
    n = c.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k k={k} out of range 1..{n}")
    order = np.argsort(-c, kind="stable")
    return order[:k]
