"""Core containers passed between modules."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOID_LABEL = 65535


@dataclass
class Prediction:
    """Output of a mask-classification model for one image.

    Attributes:
        class_logits: (N, K) class logits. When ``no_object`` is set the last
            column is the "no object" slot and K = Z + 1, otherwise K = Z.
        mask_logits: (N, H, W) mask logits.
        no_object: whether ``class_logits`` carries the trailing no-object column.
    """

    class_logits: np.ndarray
    mask_logits: np.ndarray
    no_object: bool = False

    def __post_init__(self):
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64)
        self.mask_logits = np.asarray(self.mask_logits, dtype=np.float64)
        if self.class_logits.ndim != 2:
            raise ValueError(f"class_logits must be (N, K), got {self.class_logits.shape}")
        if self.mask_logits.ndim == 2:
            # a single row of pixels
            self.mask_logits = self.mask_logits[:, None, :]
        if self.mask_logits.ndim != 3:
            raise ValueError(f"mask_logits must be (N, H, W), got {self.mask_logits.shape}")
        if self.class_logits.shape[0] != self.mask_logits.shape[0]:
            raise ValueError(
                f"query count mismatch: {self.class_logits.shape[0]} class rows vs "
                f"{self.mask_logits.shape[0]} masks"
            )
        if self.no_object and self.class_logits.shape[1] < 2:
            raise ValueError("no_object predictions need at least one real class column")

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1] - int(self.no_object)

    @property
    def hw(self) -> tuple[int, int]:
        return self.mask_logits.shape[1], self.mask_logits.shape[2]

    def class_logits_known(self) -> np.ndarray:
        """Class logits restricted to the Z real classes."""
        if self.no_object:
            return self.class_logits[:, :-1]
        return self.class_logits


@dataclass
class Taxonomy:
    """Partition of class ids into things and stuff.

    ``road`` is exempt from refinement filtering; ``unknown_id`` is the label
    given to mined unknown instances in panoptic output.
    """

    things: frozenset = field(default_factory=frozenset)
    stuff: frozenset = field(default_factory=frozenset)
    road: int | None = None
    void: int = VOID_LABEL
    unknown_id: int | None = None

    def __post_init__(self):
        self.things = frozenset(int(c) for c in self.things)
        self.stuff = frozenset(int(c) for c in self.stuff)
        overlap = self.things & self.stuff
        if overlap:
            raise ValueError(f"classes listed as both things and stuff: {sorted(overlap)}")
        if self.road is not None and self.road not in self.things | self.stuff:
            raise ValueError(f"road class {self.road} is neither thing nor stuff")
        if self.void in self.things | self.stuff:
            raise ValueError(f"void id {self.void} collides with a class id")
        if self.unknown_id is None:
            self.unknown_id = max(self.things | self.stuff, default=-1) + 1
        if self.unknown_id in self.things | self.stuff:
            raise ValueError(f"unknown id {self.unknown_id} collides with a known class id")

    @property
    def known(self) -> frozenset:
        return self.things | self.stuff

    def check_covers(self, num_classes: int):
        missing = [c for c in range(num_classes) if c not in self.known]
        if missing:
            raise ValueError(f"taxonomy does not cover class ids {missing}")

    def is_thing(self, cls: int) -> bool:
        return cls in self.things or cls == self.unknown_id

    @classmethod
    def from_dict(cls, d: dict) -> Taxonomy:
        return cls(
            things=d.get("things", ()),
            stuff=d.get("stuff", ()),
            road=d.get("road"),
            void=d.get("void", VOID_LABEL),
            unknown_id=d.get("unknown_id"),
        )

    @classmethod
    def load(cls, path) -> Taxonomy:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "things": sorted(self.things),
            "stuff": sorted(self.stuff),
            "road": self.road,
            "void": self.void,
            "unknown_id": self.unknown_id,
        }


PANOPTIC_DIVISOR = 1000


@dataclass
class PanopticMap:
    """Per-pixel class id and instance id. Stuff pixels carry instance 0."""

    classes: np.ndarray
    instances: np.ndarray
    void: int = VOID_LABEL

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.instances = np.asarray(self.instances, dtype=np.int64)
        if self.classes.shape != self.instances.shape:
            raise ValueError("class and instance maps differ in shape")

    def encode(self) -> np.ndarray:
        """Pack into ``class * 1000 + instance`` as uint32."""
        if (self.instances >= PANOPTIC_DIVISOR).any() or (self.instances < 0).any():
            raise ValueError("instance ids must lie in [0, 1000)")
        return (self.classes * PANOPTIC_DIVISOR + self.instances).astype(np.uint32)

    @classmethod
    def decode(cls, packed, void: int = VOID_LABEL) -> PanopticMap:
        packed = np.asarray(packed, dtype=np.int64)
        return cls(packed // PANOPTIC_DIVISOR, packed % PANOPTIC_DIVISOR, void=void)

    def segments(self) -> dict:
        """Map ``(class, instance) -> boolean mask`` for every non-void segment."""
        out = {}
        keep = self.classes != self.void
        keys = np.unique(np.stack([self.classes[keep], self.instances[keep]], axis=1), axis=0)
        for c, i in keys:
            out[(int(c), int(i))] = (self.classes == c) & (self.instances == i)
        return out
