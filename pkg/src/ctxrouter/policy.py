"""Role-based access control over egresses.

Two layers guard an egress:

* the egress's own policy, an allowlist or blocklist of roles;
* the runtime ACL, mapping each role to ``name@egress`` target patterns.

Both must admit the caller. The same :func:`authorize` decides join-time
sourcing and query-time access. An egress configured without a policy is open
when another context sources from it, but closed to queries.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

WILDCARD = "*"
_PART = re.compile(r"\*|[A-Za-z0-9_][A-Za-z0-9_.\-]*")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class EgressPolicy:
    mode: str = "allow"  # "allow" or "block"
    roles: frozenset = frozenset()

    def __post_init__(self):
        if self.mode not in ("allow", "block"):
            raise PolicyError(f"policy mode must be allow or block, not {self.mode!r}")
        object.__setattr__(self, "roles", frozenset(self.roles))
        for r in self.roles:
            if not isinstance(r, str) or not r:
                raise PolicyError(f"invalid role {r!r}")


def allow(policy: EgressPolicy, role: str) -> bool:
    listed = role in policy.roles or WILDCARD in policy.roles
    return listed if policy.mode == "allow" else not listed


def split_target(target: str) -> tuple[str, str]:
    name, sep, egress = target.rpartition("@")
    if not sep or not name or not egress:
        raise PolicyError(f"target must look like name@egress: {target!r}")
    return name, egress


def _check_pattern(pattern: str) -> tuple[str, str]:
    name, egress = split_target(pattern)
    if not _PART.fullmatch(name) or not _PART.fullmatch(egress):
        raise PolicyError(f"invalid target pattern {pattern!r}")
    return name, egress


@dataclass(frozen=True)
class AclTable:
    """role -> target patterns. Immutable; replace the whole table to update."""

    entries: Mapping[str, tuple[tuple[str, str], ...]]

    @classmethod
    def from_dict(cls, table: Mapping[str, Iterable[str]]) -> "AclTable":
        entries = {}
        for role, patterns in table.items():
            if not isinstance(role, str) or not role:
                raise PolicyError(f"invalid role {role!r}")
            if isinstance(patterns, str):
                raise PolicyError(f"ACL entry for {role!r} must be a list of patterns")
            entries[role] = tuple(_check_pattern(p) for p in patterns)
        return cls(entries)

    def to_dict(self) -> dict[str, list[str]]:
        return {role: [f"{n}@{e}" for n, e in pats] for role, pats in self.entries.items()}


def _part_matches(pattern: str, value: str) -> bool:
    return pattern == WILDCARD or pattern == value


def check_target(acl: AclTable, role: str, target: str) -> bool:
    name, egress = split_target(target)
    return any(
        _part_matches(pn, name) and _part_matches(pe, egress) for pn, pe in acl.entries.get(role, ())
    )


def authorize(
    policy: Optional[EgressPolicy],
    acl: Optional[AclTable],
    role: str,
    target: str,
    *,
    at_join: bool,
) -> bool:
    """Shared decision for sourcing (``at_join=True``) and querying.

    ``acl=None`` means no ACL is configured, so only the egress policy applies.
    """
    if policy is None:
        if not at_join:
            return False
    elif not allow(policy, role):
        return False
    if acl is not None and not check_target(acl, role, target):
        return False
    return True
