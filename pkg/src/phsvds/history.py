"""Per-iteration convergence records."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class HistoryEntry:
    matvecs: int
    stage: str  # "C", "B", "dynamic_probe", ...
    target_index: int
    residual_norm: float
    locked: bool = False
    annotations: list = field(default_factory=list)


@dataclass
class ConvergenceHistory:
    entries: list = field(default_factory=list)
    switches: list = field(default_factory=list)
    events: list = field(default_factory=list)
    seed: int | None = None

    def record(self, matvecs, stage, target_index, residual_norm, locked=False, annotations=()):
        if self.entries and matvecs < self.entries[-1].matvecs:
            raise ValueError("matvec counts must be non-decreasing")
        e = HistoryEntry(int(matvecs), stage, int(target_index), float(residual_norm),
                         locked, list(annotations))
        self.entries.append(e)
        return e

    def annotate(self, message, matvecs=None):
        self.events.append({"matvecs": matvecs, "message": message})

    def extend(self, other: "ConvergenceHistory", offset=0, stage=None):
        """Append another history, shifting its matvec counts by ``offset``."""
        for e in other.entries:
            self.record(e.matvecs + offset, stage or e.stage, e.target_index,
                        e.residual_norm, e.locked, e.annotations)
        for ev in other.events:
            mv = ev["matvecs"]
            self.events.append({"matvecs": None if mv is None else mv + offset,
                                "message": ev["message"]})
        self.switches.extend(other.switches)

    def residuals(self, stage=None):
        return [e.residual_norm for e in self.entries if stage is None or e.stage == stage]

    def __len__(self):
        return len(self.entries)

    def to_dict(self):
        return {
            "entries": [asdict(e) for e in self.entries],
            "switches": list(self.switches),
            "events": list(self.events),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        h = cls(seed=d.get("seed"))
        for e in d.get("entries", []):
            h.entries.append(HistoryEntry(**e))
        h.switches = list(d.get("switches", []))
        h.events = list(d.get("events", []))
        return h
