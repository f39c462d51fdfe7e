"""Box templates: tree-structured part layouts and their parameter codec.

A template is a tree of axis-aligned boxes rooted at node 0.  Each connector
glues a child flush against one face of its parent, so the child's center on
the connector axis is derived, not free.  Symmetry groups tie sibling boxes
to one representative (the first listed member): the others copy its size
and take its center mirrored through the parent's center planes.

Parameter layout, in node-id order:

* root: ``cx cy cz lx ly lz``
* free child or group representative: the two tangential center coordinates
  (ascending axis order), then ``lx ly lz``
* other group members: nothing

Sizes are stored linearly and clamped at zero on decode.  Centers are
absolute, which keeps ``encode(decode(p)) == p`` exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .errors import InvalidTemplate, LengthMismatch, ParseError, ValidationError
from .geometry import AABox, boxes_from_arrays, stack_boxes

AXES = ("X", "Y", "Z")
SIDES = {"negative": -1, "positive": 1, "-": -1, "+": 1}
LIBRARY_FORMAT = "boxtemplates-library/1"
LIBRARY_ENV = "BOXTEMPLATES_LIBRARY"


def axis_index(axis) -> int:
    if isinstance(axis, (int, np.integer)) and 0 <= axis < 3:
        return int(axis)
    try:
        return AXES.index(str(axis).upper())
    except ValueError:
        raise ValueError(f"unknown axis {axis!r}") from None


@dataclass(frozen=True)
class TemplateNode:
    id: int
    name: str


@dataclass(frozen=True)
class Connector:
    parent: int
    child: int
    axis: int
    side: int  # -1 or +1

    @classmethod
    def make(cls, parent, child, axis, side) -> Connector:
        if isinstance(side, str):
            if side not in SIDES:
                raise ValueError(f"unknown side {side!r}")
            side = SIDES[side]
        return cls(int(parent), int(child), axis_index(axis), int(side))


@dataclass(frozen=True)
class SymmetryGroup:
    members: tuple
    mirror_axes: tuple

    @classmethod
    def make(cls, members, mirror_axes) -> SymmetryGroup:
        axes = tuple(sorted({axis_index(a) for a in mirror_axes}))
        return cls(tuple(int(m) for m in members), axes)

    def mirror_set(self, k: int) -> tuple:
        """Axes reflected for the k-th member (bit j of k selects mirror axis j)."""
        return tuple(a for j, a in enumerate(self.mirror_axes) if (k >> j) & 1)


@dataclass(frozen=True)
class Template:
    template_id: int
    name: str
    families: tuple
    nodes: tuple
    connectors: tuple
    groups: tuple = ()
    layout: Optional[tuple] = field(default=None, compare=False, repr=False)

    @property
    def n_boxes(self) -> int:
        return len(self.nodes)

    @property
    def node_names(self) -> list:
        return [n.name for n in sorted(self.nodes, key=lambda n: n.id)]

    @cached_property
    def codec(self) -> Codec:
        problems = validate_template(self)
        if problems:
            raise InvalidTemplate(f"template {self.template_id} is invalid: "
                                  + "; ".join(problems), problems, self.template_id)
        return Codec(self)

    @cached_property
    def layout_params(self) -> Optional[np.ndarray]:
        """Authored rest pose projected onto the constraint set, or None."""
        if self.layout is None:
            return None
        return encode(self, list(self.layout))


def validate_template(t: Template) -> list:
    """Human-readable invariant violations; empty when the template is valid."""
    problems = []
    ids = [n.id for n in t.nodes]
    n = len(ids)
    if n == 0:
        return ["template has no nodes"]
    if sorted(ids) != list(range(n)):
        problems.append(f"node ids must be dense 0..{n - 1}, got {sorted(ids)}")
    names = [nd.name for nd in t.nodes]
    if len(set(names)) != len(names):
        problems.append("node names are not unique")
    if not t.families:
        problems.append("template has no families")

    known = set(ids)
    tree_ok = True
    for c in t.connectors:
        if c.parent not in known or c.child not in known:
            problems.append(f"connector {c.parent}->{c.child} references an unknown node id")
            tree_ok = False
        elif c.parent == c.child:
            problems.append(f"connector {c.parent}->{c.child} is a self loop")
            tree_ok = False
        if c.axis not in (0, 1, 2) or c.side not in (-1, 1):
            problems.append(f"connector {c.parent}->{c.child} has a bad axis or side")
    if tree_ok and not _is_tree(n, t.connectors):
        problems.append("graph is not a tree")
        tree_ok = False

    parent_of = {c.child: c for c in t.connectors}
    seen = set()
    for g in t.groups:
        if len(g.members) < 2:
            problems.append("group size < 2")
            continue
        if len(set(g.members)) != len(g.members) or seen & set(g.members):
            problems.append(f"group {list(g.members)} overlaps another group or repeats a member")
        seen |= set(g.members)
        if any(m not in known for m in g.members):
            problems.append(f"group {list(g.members)} references an unknown node id")
            continue
        if len(g.members) > 2 ** len(g.mirror_axes):
            problems.append(f"group {list(g.members)} has more members than "
                            f"mirror placements (2^{len(g.mirror_axes)})")
        if not tree_ok:
            continue
        if any(m not in parent_of for m in g.members):
            problems.append(f"group {list(g.members)} contains the root")
            continue
        conns = [parent_of[m] for m in g.members]
        if len({c.parent for c in conns}) != 1:
            problems.append(f"group {list(g.members)} members do not share one parent")
            continue
        rep = conns[0]
        for k, c in enumerate(conns[1:], start=1):
            flip = -1 if rep.axis in g.mirror_set(k) else 1
            if c.axis != rep.axis or c.side != rep.side * flip:
                problems.append(f"group member {c.child} connector is inconsistent "
                                "with its mirrored placement")
    if t.layout is not None and len(t.layout) != n:
        problems.append("layout must give one box per node")
    return problems


def _is_tree(n, connectors) -> bool:
    if len(connectors) != n - 1:
        return False
    parents = {}
    for c in connectors:
        if c.child in parents or c.child == 0:
            return False
        parents[c.child] = c.parent
    children = {}
    for c in connectors:
        children.setdefault(c.parent, []).append(c.child)
    reached, stack = {0}, [0]
    while stack:
        for ch in children.get(stack.pop(), []):
            if ch not in reached:
                reached.add(ch)
                stack.append(ch)
    return len(reached) == n


class Codec:
    """Precomputed decode/encode plan for one valid template."""

    def __init__(self, t: Template):
        n = t.n_boxes
        self.template_id = t.template_id
        self.n_boxes = n
        conn = {c.child: c for c in t.connectors}
        children = {i: [] for i in range(n)}
        for c in sorted(t.connectors, key=lambda c: c.child):
            children[c.parent].append(c.child)

        # role per node: ("root",) / ("free", conn) / ("mirror", conn, rep, axes)
        role = {0: ("root",)}
        self.groups = []
        for g in t.groups:
            rep = g.members[0]
            role[rep] = ("free", conn[rep])
            for k, m in enumerate(g.members[1:], start=1):
                role[m] = ("mirror", conn[m], rep, g.mirror_set(k))
            self.groups.append(g)
        for i in range(1, n):
            role.setdefault(i, ("free", conn[i]))

        slots = {}
        kinds, axes, names, owners = [], [], [], []
        node_names = t.node_names
        idx = 0
        for i in range(n):
            r = role[i]
            if r[0] == "root":
                cidx = [idx, idx + 1, idx + 2]
                sidx = [idx + 3, idx + 4, idx + 5]
                for a in range(3):
                    kinds.append("center"); axes.append(a); owners.append(i)
                    names.append(f"{node_names[i]}.c{AXES[a].lower()}")
                idx += 3
            elif r[0] == "free":
                tang = [a for a in range(3) if a != r[1].axis]
                cidx = {tang[0]: idx, tang[1]: idx + 1}
                for a in tang:
                    kinds.append("center"); axes.append(a); owners.append(i)
                    names.append(f"{node_names[i]}.c{AXES[a].lower()}")
                idx += 2
                sidx = [idx, idx + 1, idx + 2]
            else:
                slots[i] = (None, None)
                continue
            for a in range(3):
                kinds.append("size"); axes.append(a); owners.append(i)
                names.append(f"{node_names[i]}.l{AXES[a].lower()}")
            idx += 3
            slots[i] = (cidx, sidx)
        self.dim = idx
        self.param_kinds = tuple(kinds)
        self.param_axes = tuple(axes)
        self.param_names = tuple(names)
        self.param_owner = tuple(owners)
        self.size_mask = np.array([k == "size" for k in kinds])

        # topological order; within a parent, representatives before their mirrors
        order, queue = [], [0]
        while queue:
            i = queue.pop(0)
            order.append(i)
            kids = children[i]
            queue.extend([k for k in kids if role[k][0] != "mirror"]
                         + [k for k in kids if role[k][0] == "mirror"])
        self.order = order
        self.role = role
        self.slots = slots

    def check_length(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dim:
            raise LengthMismatch(f"template {self.template_id} takes {self.dim} "
                                 f"parameters, got {p.shape[-1]}")
        return p

    def decode_batch(self, params) -> tuple[np.ndarray, np.ndarray]:
        """(..., dim) parameters -> centers, sizes of shape (..., n_boxes, 3)."""
        p = self.check_length(params)
        lead = p.shape[:-1]
        centers = np.empty(lead + (self.n_boxes, 3))
        sizes = np.empty(lead + (self.n_boxes, 3))
        for i in self.order:
            r = self.role[i]
            cidx, sidx = self.slots[i]
            if r[0] == "root":
                centers[..., i, :] = p[..., cidx]
                sizes[..., i, :] = np.maximum(p[..., sidx], 0.0)
            elif r[0] == "free":
                c = r[1]
                sizes[..., i, :] = np.maximum(p[..., sidx], 0.0)
                for a, k in cidx.items():
                    centers[..., i, a] = p[..., k]
                a = c.axis
                centers[..., i, a] = centers[..., c.parent, a] + c.side * 0.5 * (
                    sizes[..., c.parent, a] + sizes[..., i, a])
            else:
                c, rep, mirrored = r[1], r[2], r[3]
                sizes[..., i, :] = sizes[..., rep, :]
                centers[..., i, :] = centers[..., rep, :]
                for a in mirrored:
                    centers[..., i, a] = 2.0 * centers[..., c.parent, a] - centers[..., rep, a]
        return centers, sizes

    def encode_arrays(self, centers, sizes) -> np.ndarray:
        centers = np.asarray(centers, dtype=float)
        sizes = np.asarray(sizes, dtype=float)
        if centers.shape != (self.n_boxes, 3) or sizes.shape != (self.n_boxes, 3):
            raise LengthMismatch(f"template {self.template_id} has {self.n_boxes} boxes, "
                                 f"got {len(centers)}")
        p = np.zeros(self.dim)
        dc = np.empty_like(centers)  # decoded centers, needed to mirror about parents
        ds = np.empty_like(sizes)
        group_of = {g.members[0]: g for g in self.groups}
        for i in self.order:
            r = self.role[i]
            cidx, sidx = self.slots[i]
            if r[0] == "root":
                p[cidx] = centers[i]
                p[sidx] = sizes[i]
                dc[i], ds[i] = centers[i], np.maximum(sizes[i], 0.0)
                continue
            if r[0] == "mirror":
                c, rep, mirrored = r[1], r[2], r[3]
                ds[i] = ds[rep]
                dc[i] = dc[rep]
                for a in mirrored:
                    dc[i, a] = 2.0 * dc[c.parent, a] - dc[rep, a]
                continue
            c = r[1]
            cen, siz = centers[i].copy(), sizes[i].copy()
            g = group_of.get(i)
            if g is not None:
                # average members after undoing their mirror, as deviations from
                # the representative so a consistent group round-trips exactly
                dev_c, dev_s = np.zeros(3), np.zeros(3)
                for k, m in enumerate(g.members[1:], start=1):
                    # compare against the placement decode would produce, so
                    # that a consistent member contributes exactly zero
                    dev = centers[m] - cen
                    for a in g.mirror_set(k):
                        dev[a] = (2.0 * dc[c.parent, a] - cen[a]) - centers[m, a]
                    dev_c += dev
                    dev_s += sizes[m] - siz
                cen = cen + dev_c / len(g.members)
                siz = siz + dev_s / len(g.members)
            for a, k in cidx.items():
                p[k] = cen[a]
            p[sidx] = siz
            ds[i] = np.maximum(siz, 0.0)
            dc[i] = cen
            a = c.axis
            dc[i, a] = dc[c.parent, a] + c.side * 0.5 * (ds[c.parent, a] + ds[i, a])
        return p


def free_param_count(t: Template) -> int:
    return t.codec.dim


def decode(t: Template, params) -> list:
    centers, sizes = t.codec.decode_batch(np.asarray(params, dtype=float).reshape(-1))
    return boxes_from_arrays(centers, sizes)


def decode_arrays(t: Template, params) -> tuple[np.ndarray, np.ndarray]:
    return t.codec.decode_batch(params)


def encode(t: Template, boxes: Sequence[AABox]) -> np.ndarray:
    """Parameters of the nearest constraint-satisfying configuration."""
    if len(boxes) != t.n_boxes:
        raise LengthMismatch(f"template {t.template_id} has {t.n_boxes} boxes, got {len(boxes)}")
    centers, sizes = stack_boxes(boxes)
    return t.codec.encode_arrays(centers, sizes)


def contact_residuals(t: Template, boxes: Sequence[AABox]) -> np.ndarray:
    """Per-connector gap between child and parent faces (0 when flush)."""
    centers, sizes = stack_boxes(boxes)
    out = []
    for c in t.connectors:
        a = c.axis
        parent_face = centers[c.parent, a] + c.side * 0.5 * sizes[c.parent, a]
        child_face = centers[c.child, a] - c.side * 0.5 * sizes[c.child, a]
        out.append(child_face - parent_face)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# library file


class _LineLoader(yaml.SafeLoader):
    pass


class _Mapping(dict):
    line = None


def _construct_mapping(loader, node, deep=False):
    m = _Mapping(loader.construct_mapping(node, deep=deep))
    m.line = node.start_mark.line + 1
    return m


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _req(m, key, where):
    if not isinstance(m, dict):
        raise ParseError(f"expected a mapping in {where}", line=getattr(m, "line", None))
    if key not in m:
        raise ParseError(f"missing key in {where}", line=m.line, field=key)
    return m[key]


def _parse_template(m) -> Template:
    tid = _req(m, "id", "template")
    where = f"template {tid}"
    try:
        name = str(m.get("name", f"template_{tid}"))
        families = tuple(str(f) for f in _req(m, "families", where))
        nodes, layout = [], []
        for nd in _req(m, "nodes", where):
            nodes.append(TemplateNode(int(_req(nd, "id", where)), str(_req(nd, "name", where))))
            if "center" in nd or "size" in nd:
                layout.append((int(nd["id"]), AABox(_req(nd, "center", where), _req(nd, "size", where))))
        connectors = [Connector.make(_req(c, "parent", where), _req(c, "child", where),
                                     _req(c, "axis", where), _req(c, "side", where))
                      for c in (m.get("connectors") or [])]
        groups = [SymmetryGroup.make(_req(g, "members", where), g.get("mirror_axes") or [])
                  for g in (m.get("groups") or [])]
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}", line=m.line) from None
    lay = None
    if layout:
        if len(layout) != len(nodes):
            raise ParseError(f"{where}: give a center/size for every node or none", line=m.line)
        lay = tuple(b for _, b in sorted(layout, key=lambda x: x[0]))
    return Template(int(tid), name, families, tuple(nodes), tuple(connectors),
                    tuple(groups), lay)


def parse_template_library(text: str) -> list:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed template library: {getattr(exc, 'problem', exc)}",
                         line=mark.line + 1 if mark else None) from None
    if not doc:
        raise ParseError("template library is empty")
    if not isinstance(doc, dict):
        raise ParseError("template library must be a mapping", line=1)
    fmt = doc.get("format")
    if fmt is not None and fmt != LIBRARY_FORMAT:
        raise ParseError(f"unsupported library format {fmt!r}", field="format")
    entries = _req(doc, "templates", "library")
    if not isinstance(entries, list) or not entries:
        raise ParseError("library defines no templates", line=doc.line, field="templates")
    templates = [_parse_template(m) for m in entries]
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate template ids", [f"duplicate ids in {ids}"])
    for t in templates:
        problems = validate_template(t)
        if problems:
            raise ValidationError(f"template {t.template_id} ({t.name}) is invalid: "
                                  + "; ".join(problems), problems, t.template_id)
    return templates


def default_library_path() -> Path:
    env = os.environ.get(LIBRARY_ENV)
    if env:
        return Path(env)
    return Path(__file__).parent / "data" / "templates.yaml"


def load_template_library(path=None) -> list:
    path = Path(path) if path is not None else default_library_path()
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read template library {path}: {exc.strerror}") from None
    return parse_template_library(text)


def templates_by_family(templates) -> dict:
    out = {}
    for t in templates:
        for f in t.families:
            out.setdefault(f, []).append(t)
    return out


def template_to_dict(t: Template) -> dict:
    nodes = []
    for nd in sorted(t.nodes, key=lambda n: n.id):
        d = {"id": nd.id, "name": nd.name}
        if t.layout is not None:
            b = t.layout[nd.id]
            d["center"] = list(b.center)
            d["size"] = list(b.size)
        nodes.append(d)
    return {
        "id": t.template_id,
        "name": t.name,
        "families": list(t.families),
        "nodes": nodes,
        "connectors": [{"parent": c.parent, "child": c.child, "axis": AXES[c.axis],
                        "side": "positive" if c.side > 0 else "negative"}
                       for c in t.connectors],
        "groups": [{"members": list(g.members), "mirror_axes": [AXES[a] for a in g.mirror_axes]}
                   for g in t.groups],
    }
