"""Checkpoint persistence with end-of-stage pruning and disk auditing.

The store keeps one blob per distinct (stage, position) pair; saving the
same point again under a new tag merges tags instead of duplicating the
blob.  A blob stays live while it carries at least one tag: the current
rollback base (``rollback``), the global best (``best``), or a per-dataset
running champion (``peak:<dataset>``).  End-of-stage pruning clears every
champion tag and deletes whatever is left untagged.

Utilization is audited from the run trace: live-blob counts are sampled at
every evaluation step.  Two averages are reported because they answer
different questions: ``average_copies`` is the empirical mean of the
per-step samples, and ``nominal_stage_average`` is the stage-slot bound
``mean_s(min(active_s, E) + 2)`` that the per-stage peak analysis predicts
(it charges the two retained slots to every stage including the first).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction

from .core import (
    CkptDelete,
    CkptSave,
    Eval,
    Exclude,
    MixschedError,
    Rollback,
    RunTrace,
    StageMark,
    TrainStep,
    frac_str,
    parse_frac,
)

TAG_ROLLBACK = "rollback"
TAG_BEST = "best"
TAG_BEST_PENDING = "best-pending"


def peak_tag(ds_id: str) -> str:
    return f"peak:{ds_id}"


class CheckpointError(MixschedError):
    """Checkpoint store misuse: missing, pruned, or invalid entries."""


@dataclass
class CheckpointMeta:
    ckpt_id: str
    compute_c: Fraction
    stage_index: int
    size_units: float = 1.0
    tags: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.size_units <= 0:
            raise CheckpointError("size_units must be > 0")
        self.tags = frozenset(self.tags)


@dataclass
class UtilizationStats:
    step_counts: list[int]
    peak_copies: int
    average_copies: float
    nominal_stage_average: float
    stage_actives: list[int]


class CheckpointStore:
    """Blob store with tag-based retention.

    ``root=None`` keeps blobs in memory; with a directory, blobs are files
    and a line-delimited manifest is rewritten atomically on every change.
    """

    def __init__(self, root: str | os.PathLike | None = None, size_units: float = 1.0):
        self._root = os.fspath(root) if root is not None else None
        self._size_units = size_units
        self._meta: dict[str, CheckpointMeta] = {}
        self._blobs: dict[str, bytes] = {}
        if self._root is not None:
            os.makedirs(self._root, exist_ok=True)
            self._load_manifest()

    # -- core operations ----------------------------------------------------

    def put(
        self,
        blob: bytes,
        *,
        compute_c: Fraction,
        stage_index: int,
        tags: set[str] | frozenset[str],
    ) -> tuple[str, bool]:
        """Store a blob; returns (ckpt_id, created).

        A live entry at the same (stage, position) absorbs the new tags and
        the blob is not written twice.
        """
        if not tags:
            raise CheckpointError("a checkpoint needs at least one tag")
        for meta in self._meta.values():
            if meta.stage_index == stage_index and meta.compute_c == compute_c:
                meta.tags = meta.tags | frozenset(tags)
                self._write_manifest()
                return meta.ckpt_id, False
        ckpt_id = f"s{stage_index}c{frac_str(compute_c).replace('/', '_')}"
        if ckpt_id in self._meta:
            raise CheckpointError(f"id collision for {ckpt_id!r}")
        meta = CheckpointMeta(
            ckpt_id=ckpt_id,
            compute_c=compute_c,
            stage_index=stage_index,
            size_units=self._size_units,
            tags=frozenset(tags),
        )
        self._meta[ckpt_id] = meta
        self._blobs[ckpt_id] = bytes(blob)
        if self._root is not None:
            with open(self._blob_path(ckpt_id), "wb") as f:
                f.write(blob)
        self._write_manifest()
        return ckpt_id, True

    def get(self, ckpt_id: str) -> bytes:
        if ckpt_id not in self._meta:
            raise CheckpointError(f"checkpoint {ckpt_id!r} pruned or unknown")
        if self._root is not None:
            with open(self._blob_path(ckpt_id), "rb") as f:
                return f.read()
        return self._blobs[ckpt_id]

    def meta(self, ckpt_id: str) -> CheckpointMeta:
        if ckpt_id not in self._meta:
            raise CheckpointError(f"checkpoint {ckpt_id!r} pruned or unknown")
        return self._meta[ckpt_id]

    def retag(self, ckpt_id: str, tags: set[str] | frozenset[str]) -> None:
        meta = self.meta(ckpt_id)
        if not tags:
            raise CheckpointError("retag to an empty tag set would orphan the blob")
        meta.tags = frozenset(tags)
        self._write_manifest()

    def add_tag(self, ckpt_id: str, tag: str) -> None:
        meta = self.meta(ckpt_id)
        meta.tags = meta.tags | {tag}
        self._write_manifest()

    def drop_tag(self, ckpt_id: str, tag: str) -> bool:
        """Remove one tag; deletes the blob when no tags remain.

        Returns True when the blob was deleted.
        """
        meta = self.meta(ckpt_id)
        meta.tags = meta.tags - {tag}
        if not meta.tags:
            self.delete(ckpt_id)
            return True
        self._write_manifest()
        return False

    def delete(self, ckpt_id: str) -> None:
        if ckpt_id not in self._meta:
            raise CheckpointError(f"checkpoint {ckpt_id!r} already gone")
        del self._meta[ckpt_id]
        self._blobs.pop(ckpt_id, None)
        if self._root is not None:
            try:
                os.unlink(self._blob_path(ckpt_id))
            except FileNotFoundError:
                pass
        self._write_manifest()

    def live_ids(self) -> list[str]:
        return sorted(self._meta)

    def live_count(self) -> int:
        return len(self._meta)

    def find_by_tag(self, tag: str) -> str | None:
        for ckpt_id, meta in sorted(self._meta.items()):
            if tag in meta.tags:
                return ckpt_id
        return None

    def prune_end_of_stage(self, keep_rollback: str, keep_best: str) -> list[str]:
        """Clear all champion tags and delete everything except the rollback
        base and the global best.  Returns the deleted ids."""
        for kid in (keep_rollback, keep_best):
            if kid not in self._meta:
                raise CheckpointError(
                    f"cannot prune: keep id {kid!r} is not live; nothing deleted"
                )
        deleted = []
        for ckpt_id in list(self._meta):
            meta = self._meta[ckpt_id]
            kept_tags = set()
            if ckpt_id == keep_rollback:
                kept_tags.add(TAG_ROLLBACK)
            if ckpt_id == keep_best:
                kept_tags.add(TAG_BEST)
            if kept_tags:
                meta.tags = frozenset(kept_tags)
            else:
                del self._meta[ckpt_id]
                self._blobs.pop(ckpt_id, None)
                if self._root is not None:
                    try:
                        os.unlink(self._blob_path(ckpt_id))
                    except FileNotFoundError:
                        pass
                deleted.append(ckpt_id)
        self._write_manifest()
        return deleted

    # -- manifest -----------------------------------------------------------

    def _blob_path(self, ckpt_id: str) -> str:
        return os.path.join(self._root, f"{ckpt_id}.blob")

    def _manifest_path(self) -> str:
        return os.path.join(self._root, "manifest.jsonl")

    def _write_manifest(self) -> None:
        if self._root is None:
            return
        lines = [json.dumps({"format": "mixsched-ckpt-manifest", "version": 1})]
        for ckpt_id in sorted(self._meta):
            m = self._meta[ckpt_id]
            lines.append(
                json.dumps(
                    {
                        "id": m.ckpt_id,
                        "compute_c": frac_str(m.compute_c),
                        "stage": m.stage_index,
                        "size_units": m.size_units,
                        "tags": sorted(m.tags),
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        fd, tmp = tempfile.mkstemp(dir=self._root, prefix=".manifest-")
        try:
            with os.fdopen(fd, "w") as f:
                f.write("\n".join(lines) + "\n")
            os.replace(tmp, self._manifest_path())
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise

    def _load_manifest(self) -> None:
        path = self._manifest_path()
        if not os.path.exists(path):
            return
        with open(path) as f:
            lines = [ln for ln in f.read().split("\n") if ln.strip()]
        for ln in lines[1:]:
            obj = json.loads(ln)
            meta = CheckpointMeta(
                ckpt_id=obj["id"],
                compute_c=parse_frac(obj["compute_c"]),
                stage_index=int(obj["stage"]),
                size_units=float(obj["size_units"]),
                tags=frozenset(obj["tags"]),
            )
            self._meta[meta.ckpt_id] = meta


# ---------------------------------------------------------------------------
# trace audit
# ---------------------------------------------------------------------------


def utilization(trace: RunTrace) -> UtilizationStats:
    """Disk utilization from a run trace.

    Live-blob counts are sampled once per evaluation step (all Eval events
    sharing one train step, plus stage-start evaluations, form one sample).
    """
    live: set[str] = set()
    step_counts: list[int] = []
    stage_actives: list[int] = []
    in_eval_group = False
    any_saves = False

    def close_group():
        nonlocal in_eval_group
        if in_eval_group:
            step_counts.append(len(live))
            in_eval_group = False

    for ev in trace.events:
        if isinstance(ev, CkptSave):
            any_saves = True
            live.add(ev.ckpt_id)
        elif isinstance(ev, CkptDelete):
            live.discard(ev.ckpt_id)
        elif isinstance(ev, Eval):
            in_eval_group = True
        elif isinstance(ev, (TrainStep, StageMark, Rollback, Exclude)):
            close_group()
            if isinstance(ev, StageMark):
                stage_actives.append(len(ev.active))
    close_group()

    if not step_counts:
        return UtilizationStats([], 0, 0.0, 0.0, stage_actives)

    peak = max(step_counts)
    avg = sum(step_counts) / len(step_counts)
    e_steps = trace.grid.n_steps
    if stage_actives:
        nominal = sum(min(m, e_steps) + 2 for m in stage_actives) / len(stage_actives)
    else:
        nominal = 0.0
    if any_saves and not peak >= avg >= 1:
        raise CheckpointError("utilization invariant violated: peak >= average >= 1")
    return UtilizationStats(
        step_counts=step_counts,
        peak_copies=peak,
        average_copies=avg,
        nominal_stage_average=nominal,
        stage_actives=stage_actives,
    )
