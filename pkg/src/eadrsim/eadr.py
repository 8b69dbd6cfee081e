"""eADR execution models: which operation classes the backup battery powers at a crash."""
from __future__ import annotations

import enum


class EadrModel(str, enum.Enum):
    ALL_OPERATION = "all-operation"
    WRITE_COMPUTE_ORDER = "write-compute-order"
    WRITE_ONLY = "write-only"

    @classmethod
    def parse(cls, value) -> "EadrModel":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"all": "all-operation", "wco": "write-compute-order", "wo": "write-only"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown eADR model {value!r}; expected one of "
                             f"{', '.join(m.value for m in cls)}") from None


_ALLOWED = {
    EadrModel.ALL_OPERATION: {"read", "compute", "write"},
    EadrModel.WRITE_COMPUTE_ORDER: {"compute", "write"},
    EadrModel.WRITE_ONLY: {"write"},
}


def model_allows(model, op_kind: str) -> bool:
    if op_kind not in ("read", "compute", "write"):
        raise ValueError(f"unknown operation kind {op_kind!r}")
    return op_kind in _ALLOWED[EadrModel.parse(model)]
