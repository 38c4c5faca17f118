from __future__ import annotations

from enum import Enum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CHAIN_TOLERANCE = 1e-9


class CompressorKind(str, Enum):
    PERMK = "permk"
    PERMK_BIG_D = "permk_big_d"
    PERMK_BIG_N = "permk_big_n"
    RANDK = "randk"
    TOPK = "topk"
    BLOCK_PERM = "block_perm"
    COMPOSED = "composed"


class Method(str, Enum):
    MARINA = "marina"
    EF21 = "ef21"
    GD = "gd"


class Objective(str, Enum):
    NONCONVEX = "nonconvex"
    PL = "pl"


class Regime(str, Enum):
    D_GE_N = "d_ge_n"
    D_LE_N = "d_le_n"


class TaskKind(str, Enum):
    QUADRATIC = "quadratic"
    DENSE_QUADRATIC = "dense_quadratic"
    AUTOENCODER = "autoencoder"


class CompressorSpec(BaseModel):
    """Which compressor to apply and with which parameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CompressorKind
    k: int | None = Field(default=None, ge=1)
    shared: bool = False
    partition: list[list[int]] | None = None
    num_blocks: int | None = Field(default=None, ge=1)
    inner: CompressorSpec | None = None
    quantizer_omega: float = Field(default=0.125, ge=0.0)

    @model_validator(mode="after")
    def _check_shape(self) -> "CompressorSpec":
        if self.kind in (CompressorKind.RANDK, CompressorKind.TOPK) and self.k is None:
            raise ValueError(f"{self.kind.value} requires k")
        if self.kind == CompressorKind.BLOCK_PERM and self.partition is None and self.num_blocks is None:
            raise ValueError("block_perm requires partition or num_blocks")
        if self.kind == CompressorKind.COMPOSED and self.inner is None:
            raise ValueError("composed requires an inner compressor")
        return self

    def label(self) -> str:
        if self.kind in (CompressorKind.RANDK, CompressorKind.TOPK):
            suffix = "-shared" if self.shared and self.kind == CompressorKind.RANDK else ""
            return f"{self.kind.value}{self.k}{suffix}"
        if self.kind == CompressorKind.BLOCK_PERM:
            blocks = len(self.partition) if self.partition is not None else self.num_blocks
            return f"block_perm{blocks}"
        if self.kind == CompressorKind.COMPOSED and self.inner is not None:
            return f"q{self.quantizer_omega:g}+{self.inner.label()}"
        return self.kind.value


CompressorSpec.model_rebuild()


class ABConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    A: float = Field(ge=0.0)
    B: float = Field(ge=0.0)
    omega: float | None = None
    approximate: bool = False

    @model_validator(mode="after")
    def _a_dominates_b(self) -> "ABConstants":
        if self.A + 1e-12 < self.B:
            raise ValueError(f"AB constants must satisfy A >= B, got A={self.A}, B={self.B}")
        return self


class SmoothnessConstants(BaseModel):
    """(L-, L+, L+-, mu) of a distributed objective, exact or upper bounds."""

    model_config = ConfigDict(frozen=True)

    l_minus: float = Field(ge=0.0)
    l_plus: float = Field(ge=0.0)
    l_pm: float = Field(ge=0.0)
    mu: float | None = Field(default=None, ge=0.0)
    exact: bool = True

    @model_validator(mode="after")
    def _check_chain(self) -> "SmoothnessConstants":
        slack = CHAIN_TOLERANCE * max(1.0, self.l_plus**2)
        if self.l_minus > self.l_plus + slack:
            raise ValueError(f"L- ({self.l_minus}) exceeds L+ ({self.l_plus})")
        if self.l_plus**2 - self.l_minus**2 > self.l_pm**2 + slack:
            raise ValueError("Hessian variance below L+^2 - L-^2")
        if self.l_pm**2 > self.l_plus**2 + slack:
            raise ValueError("Hessian variance above L+^2")
        if self.mu is not None and self.mu > self.l_minus + slack:
            raise ValueError(f"mu ({self.mu}) exceeds L- ({self.l_minus})")
        return self


class ComplexityQuery(BaseModel):
    regime: Regime | None = None
    objective: Objective = Objective.NONCONVEX
    constants: SmoothnessConstants
    d: int = Field(ge=1)
    n: int = Field(ge=1)
    delta0: float = Field(ge=0.0)
    eps: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _resolve_regime(self) -> "ComplexityQuery":
        if self.regime is None:
            self.regime = Regime.D_GE_N if self.d >= self.n else Regime.D_LE_N
        elif self.regime == Regime.D_GE_N and self.d < self.n:
            raise ValueError(f"regime d_ge_n needs d >= n, got d={self.d}, n={self.n}")
        elif self.regime == Regime.D_LE_N and self.d > self.n:
            raise ValueError(f"regime d_le_n needs d <= n, got d={self.d}, n={self.n}")
        if self.objective == Objective.PL and not self.constants.mu:
            raise ValueError("PL complexity needs a positive mu")
        return self


class GroupSpec(BaseModel):
    """One group of workers sharing a compressor family."""

    size: int = Field(ge=1)
    A: float = Field(ge=0.0)
    B: float = Field(ge=0.0)
    l_plus: float = Field(ge=0.0)
    l_pm: float = Field(ge=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Method
    compressor: CompressorSpec | None = None
    gamma: float = Field(ge=0.0)
    p: float = Field(default=1.0, gt=0.0, le=1.0)
    T: int = Field(default=1000, ge=0)
    master_seed: int = 0
    bits_per_coord: int = Field(default=32, ge=1)
    index_bits: bool = False
    threads: int = Field(default=1, ge=1)
    log_every: int = Field(default=0, ge=0)
    run_id: str | None = None
    metadata: dict[str, Any] = Field(default_factory=dict)

    @field_validator("gamma")
    @classmethod
    def _finite_gamma(cls, value: float) -> float:
        if value != value or value == float("inf"):
            raise ValueError("gamma must be finite")
        return value

    @model_validator(mode="after")
    def _check_method(self) -> "RunConfig":
        if self.method != Method.GD and self.gamma <= 0.0:
            raise ValueError(f"{self.method.value} needs gamma > 0")
        if self.method in (Method.MARINA, Method.EF21) and self.compressor is None:
            raise ValueError(f"{self.method.value} needs a compressor")
        if self.method == Method.EF21 and self.compressor is not None:
            if self.compressor.kind != CompressorKind.TOPK:
                raise ValueError("ef21 runs with the contractive topk compressor")
        return self
