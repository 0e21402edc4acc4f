"""Input checks shared by the estimator wrappers."""

from typing import List, Mapping, Sequence

from .policy_net import ParamVector
from .vrp_core import Instance


def check_instances(X, same_size: bool = True, same_variant: bool = False) -> List[Instance]:
    """Return ``X`` as a non-empty list of instances, rejecting anything else."""
    if isinstance(X, Instance):
        X = [X]
    try:
        insts = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Instance, got {type(X).__name__}") from None
    if not insts:
        raise ValueError("no instances given")
    bad = [type(x).__name__ for x in insts if not isinstance(x, Instance)]
    if bad:
        raise TypeError(f"expected Instance objects, got {bad[0]}")
    if same_size and len({x.n for x in insts}) > 1:
        raise ValueError("all instances must have the same number of customers")
    if same_variant and len({x.spec for x in insts}) > 1:
        raise ValueError("all instances must share one variant")
    return insts


def group_by_variant(insts: Sequence[Instance]) -> Mapping[str, List[Instance]]:
    out = {}
    for x in insts:
        out.setdefault(x.spec.name, []).append(x)
    return out


def check_client_data(X) -> List[List[Instance]]:
    """Federated input: a mapping or sequence with one instance collection per client."""
    if isinstance(X, Mapping):
        X = list(X.values())
    if isinstance(X, Instance) or not isinstance(X, Sequence) or not X:
        raise ValueError("expected one non-empty instance collection per client")
    clients = [check_instances(part) for part in X]
    if len({c[0].n for c in clients}) > 1:
        raise ValueError("every client must use the same problem size")
    return clients


def check_params(params, expected_len: int = None) -> ParamVector:
    if not isinstance(params, ParamVector):
        raise TypeError(f"expected a ParamVector, got {type(params).__name__}")
    if expected_len is not None and len(params) != expected_len:
        raise ValueError(f"expected {expected_len} parameters, got {len(params)}")
    return params
