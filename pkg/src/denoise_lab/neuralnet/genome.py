"""Architecture genome: three encoder blocks, one bottleneck block, three decoder blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

SEARCH_KINDS = ("conv", "depthwise-conv", "separable-time-first", "separable-freq-first")
LAYER_KINDS = SEARCH_KINDS + ("strided-conv", "transposed-conv", "dense-projection", "pyramid-pool")

# Allowed values per searchable gene.
BOUNDS = {
    "repeats": (1, 2, 3),
    "kind": SEARCH_KINDS,
    "kernel": (1, 3, 5),
    "filters": (4, 8, 16, 32),
    "dilation": (1, 2),
}
GENE_NAMES = tuple(BOUNDS)
SLOTS = ("enc0", "enc1", "enc2", "bottleneck", "dec0", "dec1", "dec2")


class GenomeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "conv"
    kernel: tuple = (3, 3)
    filters: int = 8
    dilation: tuple = (1, 1)
    stride: tuple = (1, 1)
    repeats: int = 1

    def __post_init__(self):
        for name in ("kernel", "dilation", "stride"):
            v = getattr(self, name)
            if isinstance(v, int):
                object.__setattr__(self, name, (v, v))
            else:
                object.__setattr__(self, name, tuple(int(a) for a in v))

    def problems(self, prefix=""):
        out = []
        if self.kind not in LAYER_KINDS:
            out.append(f"{prefix}kind={self.kind!r}")
        if min(self.kernel) < 1:
            out.append(f"{prefix}kernel={self.kernel}")
        if self.filters < 1:
            out.append(f"{prefix}filters={self.filters}")
        if self.repeats < 1:
            out.append(f"{prefix}repeats={self.repeats}")
        if min(self.stride) < 1:
            out.append(f"{prefix}stride={self.stride}")
        if min(self.dilation) < 1:
            out.append(f"{prefix}dilation={self.dilation}")
        return out

    def genes(self) -> dict:
        return {"repeats": self.repeats, "kind": self.kind, "kernel": self.kernel[0],
                "filters": self.filters, "dilation": self.dilation[0]}


def block(kind="conv", kernel=3, filters=8, dilation=1, repeats=1) -> LayerSpec:
    return LayerSpec(kind=kind, kernel=(kernel, kernel), filters=filters,
                     dilation=(dilation, dilation), repeats=repeats)


@dataclass(frozen=True)
class Genome:
    encoder: tuple
    bottleneck: LayerSpec
    decoder: tuple

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "decoder", tuple(self.decoder))

    @property
    def blocks(self):
        return self.encoder + (self.bottleneck,) + self.decoder

    def validate(self):
        """Raise GenomeError naming every out-of-bounds gene."""
        if len(self.encoder) != 3 or len(self.decoder) != 3:
            raise GenomeError("genome needs exactly 3 encoder and 3 decoder blocks")
        bad = []
        for slot, spec in zip(SLOTS, self.blocks):
            bad += spec.problems(f"{slot}.")
            genes = spec.genes()
            for name, allowed in BOUNDS.items():
                if genes[name] not in allowed:
                    bad.append(f"{slot}.{name}={genes[name]!r}")
            if spec.kernel[0] != spec.kernel[1] or spec.dilation[0] != spec.dilation[1]:
                bad.append(f"{slot}.kernel/dilation must be square")
        if bad:
            raise GenomeError("out-of-bounds genes: " + ", ".join(dict.fromkeys(bad)))
        return self

    def to_genes(self) -> tuple:
        """Flat tuple of the 35 searchable gene values, slot-major."""
        return tuple(spec.genes()[n] for spec in self.blocks for n in GENE_NAMES)

    @classmethod
    def from_genes(cls, values) -> "Genome":
        values = tuple(values)
        k = len(GENE_NAMES)
        if len(values) != k * len(SLOTS):
            raise GenomeError(f"expected {k * len(SLOTS)} genes, got {len(values)}")
        specs = [block(**dict(zip(GENE_NAMES, values[i * k:(i + 1) * k]))) for i in range(len(SLOTS))]
        return cls(specs[:3], specs[3], specs[4:])

    def to_dict(self) -> dict:
        return {slot: asdict(spec) for slot, spec in zip(SLOTS, self.blocks)}

    @classmethod
    def from_dict(cls, d) -> "Genome":
        specs = [LayerSpec(**d[slot]) for slot in SLOTS]
        return cls(specs[:3], specs[3], specs[4:])

    @classmethod
    def uniform(cls, **kw) -> "Genome":
        spec = block(**kw)
        return cls([spec] * 3, spec, [spec] * 3)


def minimal_genome(filters=4) -> Genome:
    return Genome.uniform(kind="conv", kernel=3, filters=filters, dilation=1, repeats=1)
