"""Annotated Newick for dated trees with catastrophe counts.

Edges carry ``[&k=<int>]`` annotations; every node also carries its age as
``age=<float>`` so that a round trip is exact.  Trees written by other
tools (lengths only) are read with the deepest leaf placed at age zero.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .phylotree import Phylogeny

_SPECIAL = set("()[]:;,' \t\n")


class NewickError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


@dataclass
class _Node:
    label: str = ""
    length: float | None = None
    attrs: dict = field(default_factory=dict)
    children: list = field(default_factory=list)


def _fmt(x: float) -> str:
    return repr(float(x))


def _quote(label: str) -> str:
    if label and not any(ch in _SPECIAL for ch in label):
        return label
    return "'" + label.replace("'", "''") + "'"


def format_annotation(attrs: dict) -> str:
    if not attrs:
        return ""
    body = ",".join(f"{k}={v}" for k, v in attrs.items())
    return f"[&{body}]"


def encode_newick(tree: Phylogeny) -> str:
    ch = tree.children
    lengths = tree.edge_lengths()

    def rec(i: int) -> str:
        if tree.is_leaf(i):
            head = _quote(tree.labels[i])
        else:
            head = "(" + ",".join(rec(int(c)) for c in ch[i]) + ")"
        if i == tree.root:
            return head + format_annotation({"age": _fmt(tree.ages[i])})
        attrs = {"age": _fmt(tree.ages[i]), "k": int(tree.cats[i])}
        return f"{head}:{_fmt(lengths[i])}{format_annotation(attrs)}"

    return rec(tree.root) + ";"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str):
        raise NewickError(msg, self.pos)

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch: str):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self) -> _Node:
        node = self.subtree()
        self.skip_ws()
        if self.peek() != ";":
            self.error("expected ';'")
        self.pos += 1
        if self.peek():
            self.error("trailing text after ';'")
        return node

    def subtree(self) -> _Node:
        node = _Node()
        if self.peek() == "(":
            self.pos += 1
            node.children.append(self.subtree())
            while self.peek() == ",":
                self.pos += 1
                node.children.append(self.subtree())
            self.expect(")")
        node.label = self.label()
        self.annotations(node)
        if self.peek() == ":":
            self.pos += 1
            node.length = self.number()
            self.annotations(node)
        if not node.children and not node.label:
            self.error("leaf without a label")
        return node

    def label(self) -> str:
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == "'":
            out = []
            self.pos += 1
            while True:
                if self.pos >= len(self.text):
                    self.error("unterminated quoted label")
                ch = self.text[self.pos]
                if ch == "'":
                    if self.text[self.pos + 1: self.pos + 2] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(out)
                out.append(ch)
                self.pos += 1
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _SPECIAL:
            self.pos += 1
        return self.text[start:self.pos]

    def number(self) -> float:
        self.skip_ws()
        m = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?").match(self.text, self.pos)
        if not m:
            self.error("expected a branch length")
        self.pos = m.end()
        return float(m.group(0))

    def annotations(self, node: _Node):
        while self.peek() == "[":
            start = self.pos
            end = self.text.find("]", start)
            if end < 0:
                self.error("unterminated comment")
            body = self.text[start + 1: end]
            self.pos = end + 1
            if not body.startswith("&"):
                continue
            for item in body[1:].split(","):
                if not item.strip():
                    continue
                if "=" not in item:
                    raise NewickError(f"malformed annotation {item!r}", start)
                key, val = item.split("=", 1)
                node.attrs[key.strip()] = val.strip()


def decode_newick(text: str, labels=None) -> Phylogeny:
    """Parse annotated Newick into a :class:`Phylogeny`.

    ``labels`` fixes the leaf numbering; by default leaves are numbered in
    order of appearance.
    """
    root = _Parser(text.strip()).parse()
    nodes: list[_Node] = []
    parents: list[int] = []
    depth: list[float] = []

    stack = [(root, -1, 0.0)]
    while stack:
        node, par, d = stack.pop()
        idx = len(nodes)
        nodes.append(node)
        parents.append(par)
        depth.append(d)
        if node.children and len(node.children) != 2:
            raise NewickError(f"node with {len(node.children)} children; trees must be binary", 0)
        for child in reversed(node.children):
            if child.length is None and "age" not in child.attrs:
                raise NewickError(f"edge above {child.label or 'internal node'} has no length", 0)
            stack.append((child, idx, d + (child.length or 0.0)))

    leaves = [i for i, n in enumerate(nodes) if not n.children]
    internal = [i for i, n in enumerate(nodes) if n.children]
    leaf_labels = [nodes[i].label for i in leaves]
    if labels is not None:
        labels = tuple(labels)
        if sorted(labels) != sorted(leaf_labels):
            raise ValueError("leaf labels in the tree do not match the requested labels")
        leaves = [leaves[leaf_labels.index(lab)] for lab in labels]
        leaf_labels = list(labels)
    order = leaves + internal
    new_of_old = {old: new for new, old in enumerate(order)}

    if "age" in root.attrs:
        root_age = float(root.attrs["age"])
    else:
        root_age = max(depth)
    n = len(order)
    parent = np.empty(n, dtype=np.int64)
    ages = np.empty(n)
    cats = np.zeros(n, dtype=np.int64)
    for new, old in enumerate(order):
        node = nodes[old]
        parent[new] = -1 if parents[old] < 0 else new_of_old[parents[old]]
        ages[new] = float(node.attrs["age"]) if "age" in node.attrs else root_age - depth[old]
        if "k" in node.attrs:
            try:
                cats[new] = int(node.attrs["k"])
            except ValueError:
                raise NewickError(f"catastrophe count {node.attrs['k']!r} is not an integer", 0) from None
    cats[parent < 0] = 0
    return Phylogeny(tuple(leaf_labels), parent, ages, cats)


def strip_comment(line: str) -> str:
    """Drop a leading ``[...]`` comment such as the ``[&iter=N]`` tag of sampled trees."""
    line = line.strip()
    if line.startswith("["):
        end = line.find("]")
        if end < 0:
            raise NewickError("unterminated leading comment", 0)
        line = line[end + 1:].strip()
    return line


def read_trees(path, labels=None) -> list[Phylogeny]:
    """One tree per non-empty line; leading comments are ignored."""
    with open(path) as fh:
        return [decode_newick(strip_comment(line), labels) for line in fh if line.strip()]
