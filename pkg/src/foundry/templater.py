"""Topology-templated graph reconstruction.

Graphs sharing a topology key form a group. LOAD builds and instantiates
one executable per group (the template) and serves every other member by
applying that member's node parameters in place. Parameter preparation
touches no driver state, so it runs on as many lanes as are available while
the single builder lane constructs templates.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

from foundry.graph import ParamSet, param_set

PREP_LANES = 8


@dataclass(frozen=True)
class TemplateGroup:
    key: bytes
    representative: int
    members: tuple
    locators: tuple

    def locator(self, label):
        return self.locators[self.members.index(label)]

    def to_dict(self):
        return {
            "key": self.key.hex(),
            "representative": self.representative,
            "members": list(self.members),
            "locators": list(self.locators),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(bytes.fromhex(d["key"]), d["representative"], tuple(d["members"]), tuple(d["locators"]))


@dataclass
class GroupingManifest:
    groups: list
    total: int

    @property
    def template_count(self):
        return len(self.groups)

    @property
    def update_served(self):
        return self.total - self.template_count

    @property
    def update_fraction(self):
        return self.update_served / self.total if self.total else 0.0

    def group_of(self, label) -> int:
        for i, g in enumerate(self.groups):
            if label in g.members:
                return i
        raise KeyError(label)

    def labels(self):
        return sorted(label for g in self.groups for label in g.members)

    def to_dict(self):
        return {
            "total": self.total,
            "template_count": self.template_count,
            "groups": [g.to_dict() for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d):
        m = cls([TemplateGroup.from_dict(g) for g in d["groups"]], d["total"])
        if sum(len(g.members) for g in m.groups) != m.total or d.get("template_count", m.template_count) != len(m.groups):
            raise ValueError("grouping counts are inconsistent")
        return m


def group(graphs, locators=None) -> GroupingManifest:
    """Partition by topology key; the smallest label in each group is its template.

    ``locators[i]`` is where graph ``i`` lives in the serialized container
    (defaults to its position in ``graphs``).
    """
    graphs = list(graphs)
    if locators is None:
        locators = range(len(graphs))
    by_key = {}
    for g, loc in zip(graphs, locators):
        by_key.setdefault(g.key, []).append((g.label, loc))
    groups = []
    for key, members in by_key.items():
        members.sort()
        groups.append(
            TemplateGroup(key, members[0][0], tuple(m[0] for m in members), tuple(m[1] for m in members))
        )
    groups.sort(key=lambda g: g.representative)
    return GroupingManifest(groups, len(graphs))


class RoutingError(LookupError):
    """A batch size was sent to a slot whose group does not contain it."""


@dataclass
class ServingSlot:
    group: TemplateGroup
    exe: object
    applied: int

    def serve(self, ctx, label, prepare, resolver=None):
        if label not in self.group.members:
            raise RoutingError(f"batch size {label} is not a member of the group templated by {self.group.representative}")
        if label == self.applied:
            return self.exe, False
        ctx.exec_update(self.exe, prepare(label), resolver)
        self.applied = label
        return self.exe, True


class Templater:
    """Builds templates for a grouping manifest and serves any member.

    ``source`` provides ``graph(locator)``; ``transform`` (for example a
    rank patch) is applied to every decoded graph before use.
    """

    def __init__(self, ctx, manifest: GroupingManifest, source, resolver=None, transform: Optional[Callable] = None):
        self.ctx = ctx
        self.manifest = manifest
        self.source = source
        self.resolver = resolver
        self.transform = transform
        self.slots = {}
        self.prepared = {}
        self.updates = 0
        self._route = {label: i for i, g in enumerate(manifest.groups) for label in g.members}
        self._lock = threading.Lock()

    def _graph(self, group: TemplateGroup, label):
        g = self.source.graph(group.locator(label))
        if g.label != label:
            raise ValueError(f"locator for batch size {label} points at graph {g.label}")
        return self.transform(g) if self.transform else g

    def build_templates(self):
        """One build + instantiate per group, issued sequentially on this thread."""
        for i, grp in enumerate(self.manifest.groups):
            rep = self._graph(grp, grp.representative)
            handle = self.ctx.build_graph(rep, self.resolver)
            exe = self.ctx.instantiate(handle)
            self.ctx.destroy_graph(handle)
            self.slots[i] = ServingSlot(grp, exe, grp.representative)
        return self.slots

    def prepare_params(self, label) -> ParamSet:
        """Decode one member's node parameters. Issues no driver calls."""
        grp = self.manifest.groups[self._route[label]]
        ps = param_set(self._graph(grp, label))
        if ps.key != grp.key:
            raise ValueError(f"graph {label} does not carry its group's topology key")
        with self._lock:
            self.prepared[label] = ps
        return ps

    def prepare_all(self, lanes=PREP_LANES, include_representatives=False):
        labels = [
            label
            for g in self.manifest.groups
            for label in g.members
            if include_representatives or label != g.representative
        ]
        if lanes <= 1:
            return [self.prepare_params(label) for label in labels]
        with ThreadPoolExecutor(max_workers=lanes, thread_name_prefix="foundry-prep") as pool:
            return list(pool.map(self.prepare_params, labels))

    def slot_for(self, label) -> ServingSlot:
        try:
            return self.slots[self._route[label]]
        except KeyError:
            raise RoutingError(f"no template serves batch size {label}") from None

    def serve(self, label):
        """Executable ready to replay batch size ``label``."""
        slot = self.slot_for(label)
        exe, updated = slot.serve(self.ctx, label, self._prepared_or_decode, self.resolver)
        if updated:
            self.updates += 1
        return exe

    def _prepared_or_decode(self, label):
        ps = self.prepared.get(label)
        return ps if ps is not None else self.prepare_params(label)
