"""Suite reports, trace persistence, and CSV/JSON emission.

Traces are line-delimited JSON, one record per replanning round, written
with sorted keys so identical runs produce identical bytes. Reports carry
per-condition aggregates that are always re-derivable from the traces.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .metrics import pool_round_records

CSV_COLUMNS = [
    "condition_id",
    "method",
    "mode",
    "profile",
    "speed",
    "variant",
    "trials",
    "SR",
    "Lat_ms",
    "per_action_ms",
    "FR",
    "Acc",
    "speedup",
]


@dataclass(frozen=True)
class ConditionResult:
    """Aggregates for one (method, speed, variant) cell of the benchmark grid."""

    condition_id: str
    method: str
    mode: str
    profile: str
    speed: str
    variant: str
    trials: int
    seeds: tuple[int, ...]
    sr: float
    lat_ms: float
    per_action_ms: float
    fr: float
    acc: float
    speedup: float | None = None

    def csv_row(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "method": self.method,
            "mode": self.mode,
            "profile": self.profile,
            "speed": self.speed,
            "variant": self.variant,
            "trials": self.trials,
            "SR": f"{self.sr:.6f}",
            "Lat_ms": f"{self.lat_ms:.6f}",
            "per_action_ms": f"{self.per_action_ms:.6f}",
            "FR": f"{self.fr:.6f}",
            "Acc": f"{self.acc:.6f}",
            "speedup": "" if self.speedup is None else f"{self.speedup:.6f}",
        }


@dataclass
class SuiteReport:
    """Everything one benchmark invocation produced."""

    conditions: list[ConditionResult]
    config_fingerprint: str
    seed: int
    code_version: str
    replan_size: int
    episodes: list[dict] = field(default_factory=list)  # per-episode stats dicts

    def to_json_dict(self) -> dict:
        return {
            "schema": "suite_report@1",
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "code_version": self.code_version,
            "replan_size": self.replan_size,
            "conditions": [asdict(c) for c in self.conditions],
            "episodes": self.episodes,
        }


def dump_json_line(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_trace(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dump_json_line(rec))
            fh.write("\n")


def read_trace(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def emit_report(report: SuiteReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the CSV table and the full JSON report; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    json_path = out / "report.json"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for cond in report.conditions:
        writer.writerow(cond.csv_row())
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    json_path.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return {"csv": csv_path, "json": json_path}


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def condition_from_records(
    condition: Mapping[str, str],
    trial_records: Sequence[Sequence[Mapping]],
    seeds: Sequence[int],
    replan_size: int,
) -> ConditionResult:
    """Pool per-trial round records into one condition row (pure fold)."""
    flat = [rec for trial in trial_records for rec in trial]
    pooled = pool_round_records(flat)
    successes = 0
    for trial in trial_records:
        if not trial:
            raise ValueError("empty trial trace")
        successes += 1 if trial[-1].get("terminal") == "success" else 0
    return ConditionResult(
        condition_id=str(condition["condition_id"]),
        method=str(condition["method"]),
        mode=str(condition["mode"]),
        profile=str(condition["profile"]),
        speed=str(condition["speed"]),
        variant=str(condition["variant"]),
        trials=len(trial_records),
        seeds=tuple(int(s) for s in seeds),
        sr=successes / len(trial_records),
        lat_ms=pooled.lat_ms,
        per_action_ms=pooled.per_action_ms,
        fr=pooled.flash_rate,
        acc=pooled.acc(replan_size),
    )


def apply_speedup(
    conditions: Sequence[ConditionResult], baseline_method: str
) -> list[ConditionResult]:
    """Fill the speedup column: baseline Lat over condition Lat, matched by cell."""
    by_key = {(c.method, c.speed, c.variant): c for c in conditions}
    out = []
    for c in conditions:
        base = by_key.get((baseline_method, c.speed, c.variant))
        ratio = base.lat_ms / c.lat_ms if base is not None and c.lat_ms > 0 else None
        out.append(ConditionResult(**{**c.__dict__, "speedup": ratio}))
    return out


def reaggregate_traces(
    records: Sequence[Mapping], replan_size: int
) -> list[ConditionResult]:
    """Rebuild condition rows from raw trace records (the report is a pure fold)."""
    by_condition: dict[str, dict[int, list[Mapping]]] = {}
    meta: dict[str, Mapping] = {}
    for rec in records:
        cid = rec["condition_id"]
        by_condition.setdefault(cid, {}).setdefault(int(rec["episode_seed"]), []).append(rec)
        meta[cid] = rec
    out = []
    for cid in sorted(by_condition):
        trials = by_condition[cid]
        seeds = sorted(trials)
        trial_records = [
            sorted(trials[s], key=lambda r: int(r["round"])) for s in seeds
        ]
        out.append(
            condition_from_records(meta[cid], trial_records, seeds, replan_size)
        )
    return out
