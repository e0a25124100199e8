"""Model directory layout and integrity manifest.

A trained model lives in one directory::

    model/
      manifest.txt          versions, seeds, content hash per component
      forests/<joint>.acpf  one binary forest per joint
      pairwise.txt          deformation statistics
      sharing.txt           appearance-sharing weights (optional)
      action/codebooks.txt  action classifier (optional)
      action/svm.txt

The manifest stores a sha256 per file; loading verifies every hash, so a
corrupted or hand-edited component fails fast instead of producing quietly
wrong poses.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path

from . import action as action_mod
from . import core, forest, pairwise, sharing
from .pipeline import ModelBundle

MANIFEST_MAGIC = "ACPM1"


class ModelError(RuntimeError):
    """A model component is missing or fails integrity checks."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(bundle: ModelBundle, directory, seed: int | None = None) -> None:
    directory = Path(directory)
    (directory / "forests").mkdir(parents=True, exist_ok=True)
    files = []
    for name, fr in bundle.forests.items():
        rel = f"forests/{name}.acpf"
        forest.save_forest(fr, directory / rel)
        files.append(rel)
    pairwise.save_conditional_pairwise(
        bundle.pairwise_model, directory / "pairwise.txt"
    )
    files.append("pairwise.txt")
    if bundle.sharing_weights is not None:
        sharing.save_sharing(bundle.sharing_weights, directory / "sharing.txt")
        files.append("sharing.txt")
    if bundle.action_model is not None:
        action_mod.save_action_model(bundle.action_model, directory / "action")
        files.append("action/codebooks.txt")
        files.append("action/svm.txt")
    lines = [MANIFEST_MAGIC]
    lines.append(f"created {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}")
    lines.append("actions " + " ".join(bundle.action_names))
    lines.append("joints " + " ".join(bundle.tree.joints))
    lines.append(
        "edges " + " ".join(f"{c}:{p}" for c, p in bundle.tree.edges)
    )
    lines.append(f"root {bundle.tree.root}")
    if seed is not None:
        lines.append(f"seed {seed}")
    for rel in files:
        lines.append(f"file {rel} sha256 {_sha256(directory / rel)}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_bundle(directory) -> ModelBundle:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise ModelError(f"{manifest}: model manifest not found")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ModelError(f"{manifest}: bad manifest magic")
    action_names: tuple[str, ...] = ()
    joints: tuple[str, ...] = ()
    edges: tuple[tuple[str, str], ...] = ()
    root = ""
    files: list[tuple[str, str]] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "actions":
            action_names = tuple(parts[1:])
        elif parts[0] == "joints":
            joints = tuple(parts[1:])
        elif parts[0] == "edges":
            edges = tuple(tuple(p.split(":")) for p in parts[1:])
        elif parts[0] == "root":
            root = parts[1]
        elif parts[0] == "file":
            files.append((parts[1], parts[3]))
    for rel, digest in files:
        path = directory / rel
        if not path.exists():
            raise ModelError(f"missing model component {rel}")
        if _sha256(path) != digest:
            raise ModelError(f"hash mismatch for model component {rel}")
    listed = {f for f, _ in files}
    tree = core.KinematicTree(joints, edges, root)
    forests = {}
    for name in joints:
        rel = f"forests/{name}.acpf"
        if rel not in listed:
            raise ModelError(f"manifest lists no forest for joint {name}")
        forests[name] = forest.load_forest(directory / rel)
    pair_model = pairwise.load_conditional_pairwise(directory / "pairwise.txt")
    sharing_weights = None
    if "sharing.txt" in listed:
        sharing_weights = sharing.load_sharing(directory / "sharing.txt")
    model = None
    if "action/svm.txt" in listed:
        model = action_mod.load_action_model(directory / "action")
    return ModelBundle(
        tree, forests, pair_model, sharing_weights, model, action_names
    )
