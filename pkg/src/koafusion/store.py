"""Cohort persistence: one JSON manifest plus VOL1 image files.

``save_cohort`` streams records to disk (safe for full-scale cohorts that do
not fit in memory); ``load_cohort`` returns records whose image references
are manifest entries resolved lazily by the provider.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cohort import SubjectRecord
from .errors import ContractViolation
from .imaging import Volume
from .relaxometry import MultiEchoVolume
from .vol1 import write_vol1

MANIFEST_NAME = "cohort.json"


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _save_image(ref, key: str, sid: str, image_dir: Path) -> dict:
    if isinstance(ref, dict):
        return ref  # already on disk; keep the manifest entry as-is
    path = image_dir / f"{sid}_{key}.vol1"
    if isinstance(ref, MultiEchoVolume):
        write_vol1(path, ref.data, spacing=tuple(ref.spacing) + (1.0,))
        return {"path": f"images/{path.name}", "echo_times": [float(t) for t in ref.echo_times]}
    if isinstance(ref, Volume):
        data = ref.data
        # integer-valued acquisitions of <= 16 bits roundtrip exactly as u16
        if (
            ref.dtype_bits <= 16
            and np.all(data >= 0)
            and np.all(data < 65536)
            and np.all(data == np.round(data))
        ):
            data = data.astype(np.uint16)
        write_vol1(path, data, spacing=ref.spacing)
        return {"path": f"images/{path.name}", "dtype_bits": int(ref.dtype_bits)}
    raise ContractViolation(f"unsupported image reference for {sid}/{key}")


def save_cohort(records, out_dir) -> Path:
    """Write every record's images and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        images = {
            key: _save_image(ref, key, rec.subject_id, image_dir)
            for key, ref in sorted(rec.image_refs.items())
        }
        entries.append(
            {
                "subject_id": rec.subject_id,
                "age": rec.age,
                "sex": rec.sex,
                "bmi": rec.bmi,
                "womac_total": rec.womac_total,
                "prior_injury": rec.prior_injury,
                "prior_surgery": rec.prior_surgery,
                "site": rec.site,
                "klg_by_visit": {str(m): int(g) for m, g in sorted(rec.klg_by_visit.items())},
                "images": images,
            }
        )
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(canonical_json({"format": "cohort/1", "subjects": entries}))
    return manifest_path


def load_cohort(manifest_path) -> list:
    """Read a manifest back into records with path-based image references."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    payload = json.loads(manifest_path.read_text())
    if payload.get("format") != "cohort/1":
        raise ContractViolation(f"{manifest_path} is not a cohort manifest")
    records = []
    for entry in payload["subjects"]:
        images = {}
        for key, ref in entry["images"].items():
            ref = dict(ref)
            ref["path"] = str(base / ref["path"])
            images[key] = ref
        records.append(
            SubjectRecord(
                subject_id=entry["subject_id"],
                age=float(entry["age"]),
                sex=entry["sex"],
                bmi=float(entry["bmi"]),
                womac_total=float(entry["womac_total"]),
                prior_injury=bool(entry["prior_injury"]),
                prior_surgery=bool(entry["prior_surgery"]),
                site=entry["site"],
                klg_by_visit={int(m): int(g) for m, g in entry["klg_by_visit"].items()},
                image_refs=images,
            )
        )
    return records
