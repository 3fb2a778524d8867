"""Which backbone parameters a fine-tuning run is allowed to update."""

from __future__ import annotations

from dataclasses import dataclass, field

from svflab.validation import check_stage_set

KINDS = ("freeze", "full", "layers", "convkind", "svf")
CONV_KINDS = ("3x3", "1x1", "both")
SUBSPACES = ("U", "S", "V")
VARIANTS = ("A", "B")
DEFAULT_SVF_STAGES = frozenset({2, 3, 4})


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "svf"
    stages: frozenset = field(default=DEFAULT_SVF_STAGES)
    conv_kind: str = "both"
    subspaces: frozenset = field(default=frozenset({"S"}))
    variant: str = "A"
    bn_trainable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "stages", check_stage_set(self.stages))
        subspaces = frozenset(s.upper() for s in self.subspaces)
        object.__setattr__(self, "subspaces", subspaces)
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.conv_kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SVF variant {self.variant!r}")
        if self.kind == "svf":
            if not subspaces:
                raise ValueError("SVF strategy needs at least one of U, S, V")
            bad = subspaces - set(SUBSPACES)
            if bad:
                raise ValueError(f"unknown SVF subspaces {sorted(bad)}")

    @classmethod
    def freeze(cls, bn_trainable=False):
        return cls("freeze", stages=frozenset(), bn_trainable=bn_trainable)

    @classmethod
    def full(cls, bn_trainable=False):
        return cls("full", stages=frozenset({1, 2, 3, 4}), bn_trainable=bn_trainable)

    @classmethod
    def layers(cls, stages, bn_trainable=False):
        return cls("layers", stages=frozenset(stages), bn_trainable=bn_trainable)

    @classmethod
    def convkind(cls, conv_kind, stages=DEFAULT_SVF_STAGES, bn_trainable=False):
        return cls("convkind", stages=frozenset(stages), conv_kind=conv_kind, bn_trainable=bn_trainable)

    @classmethod
    def svf(cls, subspaces="S", stages=DEFAULT_SVF_STAGES, variant="A", bn_trainable=False):
        return cls("svf", stages=frozenset(stages), subspaces=frozenset(subspaces),
                   variant=variant, bn_trainable=bn_trainable)

    @property
    def is_svf(self) -> bool:
        return self.kind == "svf"

    def selects(self, stage: int | None, kernel: int) -> bool:
        """Whether a conv at ``stage`` with a ``kernel``-sized kernel is touched by this strategy.

        ``stage=None`` marks a conv outside any stage plan; it is selected by every stage set.
        """
        if self.kind == "freeze":
            return False
        if self.kind == "full":
            return True
        in_stage = stage is None or stage in self.stages
        if self.kind == "convkind":
            kind_ok = self.conv_kind == "both" or self.conv_kind == f"{kernel}x{kernel}"
            return in_stage and kind_ok
        return in_stage

    @property
    def label(self) -> str:
        stages = "".join(str(s) for s in sorted(self.stages))
        bn = "+bn" if self.bn_trainable else ""
        if self.kind == "freeze":
            return f"freeze{bn}"
        if self.kind == "full":
            return f"full{bn}"
        if self.kind == "layers":
            return f"layers@{stages}{bn}"
        if self.kind == "convkind":
            return f"convkind[{self.conv_kind}]@{stages}{bn}"
        subs = "".join(s for s in SUBSPACES if s in self.subspaces)
        variant = "" if self.variant == "A" else "/B"
        return f"svf[{subs}]@{stages}{variant}{bn}"

    def to_dict(self) -> dict[str, str]:
        return {
            "kind": self.kind,
            "stages": ",".join(str(s) for s in sorted(self.stages)),
            "conv_kind": self.conv_kind,
            "subspaces": ",".join(s for s in SUBSPACES if s in self.subspaces),
            "variant": self.variant,
            "bn_trainable": str(self.bn_trainable).lower(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "StrategyConfig":
        kind = d.get("kind", "svf")
        stages_txt = d.get("stages", "")
        if stages_txt.strip():
            stages = frozenset(int(s) for s in stages_txt.split(",") if s.strip())
        elif kind == "full":
            stages = frozenset({1, 2, 3, 4})
        elif kind in ("svf", "convkind", "layers"):
            stages = DEFAULT_SVF_STAGES
        else:
            stages = frozenset()
        subs = frozenset(s.strip().upper() for s in d.get("subspaces", "S").split(",") if s.strip())
        bn = d.get("bn_trainable", "false").strip().lower()
        if bn not in ("true", "false"):
            raise ValueError(f"bn_trainable must be true or false, got {bn!r}")
        return cls(kind=kind, stages=stages, conv_kind=d.get("conv_kind", "both"),
                   subspaces=subs, variant=d.get("variant", "A"), bn_trainable=bn == "true")
