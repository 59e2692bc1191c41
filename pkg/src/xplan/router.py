"""Per-edit-type backend selection ("bag of models")."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Collection, Mapping, Optional

from xplan.plan_ir import EditType

DEFAULT_BACKEND = "default"
INPAINT_BACKEND = "inpaint"
GLOBAL_BACKEND = "global"


class UnregisteredBackend(LookupError):
    pass


@dataclass(frozen=True)
class RoutingTable:
    routes: Mapping[EditType, str] = field(default_factory=dict)
    default_backend: str = DEFAULT_BACKEND

    def __post_init__(self):
        if not self.default_backend:
            raise ValueError("routing table needs a default backend")
        routes = {EditType.parse(k) if isinstance(k, str) else k: v for k, v in self.routes.items()}
        object.__setattr__(self, "routes", MappingProxyType(routes))

    def backends(self) -> set[str]:
        return {self.default_backend, *self.routes.values()}

    def check_registered(self, registered: Collection[str]) -> None:
        missing = self.backends() - set(registered)
        if missing:
            raise UnregisteredBackend(f"no client registered for {sorted(missing)}")

    def to_dict(self) -> dict:
        return {
            "default": self.default_backend,
            "routes": {k.value: v for k, v in sorted(self.routes.items())},
        }


# removal goes to an inpainting model, style to a global editor, the rest to
# the general instruction editor
BAG_OF_MODELS = RoutingTable(
    {EditType.REMOVE: INPAINT_BACKEND, EditType.STYLE: GLOBAL_BACKEND},
    DEFAULT_BACKEND,
)
SINGLE_MODEL = RoutingTable({}, DEFAULT_BACKEND)

PROFILES = {"bag-of-models": BAG_OF_MODELS, "single-model": SINGLE_MODEL}


def routing_profile(name: str) -> RoutingTable:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown routing profile {name!r}; have {sorted(PROFILES)}") from None


def route_edit(
    edit_type: EditType,
    table: RoutingTable,
    registered: Optional[Collection[str]] = None,
) -> str:
    backend = table.routes.get(EditType(edit_type), table.default_backend)
    if registered is not None and backend not in registered:
        raise UnregisteredBackend(f"{edit_type.value} routes to unregistered backend {backend!r}")
    return backend
