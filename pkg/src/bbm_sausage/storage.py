"""
Result storage for experiment runs.

Files are written to a local output directory and, when RESULTS_BUCKET is set, mirrored to
S3 (LocalStack works through AWS_ENDPOINT_URL).
"""

import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import boto3
import pandas as pd
from botocore.config import Config
from botocore.exceptions import BotoCoreError, ClientError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["experiment", "t", "seed", "method", "value", "stderr", "theory", "ratio"]


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    t: float
    seed: int
    method: str
    value: Optional[float] = None
    stderr: Optional[float] = None
    theory: Optional[float] = None
    ratio: Optional[float] = None

    @classmethod
    def measured(
        cls,
        experiment: str,
        t: float,
        seed: int,
        method: str,
        value: Optional[float],
        stderr: Optional[float] = None,
        theory: Optional[float] = None,
    ) -> "ResultRow":
        """Build a row, filling in measured/theory when the theory value is nonzero."""
        ratio = None
        if value is not None and theory is not None and theory != 0:
            ratio = value / theory
        return cls(experiment, t, seed, method, value, stderr, theory, ratio)

    def sort_key(self):
        return (self.experiment, self.t, self.seed, self.method)

    def to_dict(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


def _optional(value) -> Optional[float]:
    return None if pd.isna(value) else float(value)


def emit_rows(rows: Iterable[ResultRow]) -> str:
    frame = pd.DataFrame(
        [row.to_dict() for row in sorted(rows, key=ResultRow.sort_key)], columns=CSV_COLUMNS
    )
    return frame.to_csv(index=False, na_rep="", lineterminator="\n")


def parse_rows(text: str) -> List[ResultRow]:
    frame = pd.read_csv(
        io.StringIO(text),
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
    )
    if list(frame.columns) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {list(frame.columns)}")
    return [
        ResultRow(
            experiment=str(record.experiment),
            t=float(record.t),
            seed=int(record.seed),
            method=str(record.method),
            value=_optional(record.value),
            stderr=_optional(record.stderr),
            theory=_optional(record.theory),
            ratio=_optional(record.ratio),
        )
        for record in frame.itertuples(index=False)
    ]


def emit_json(rows: Iterable[ResultRow]) -> str:
    return json.dumps([row.to_dict() for row in sorted(rows, key=ResultRow.sort_key)], indent=2)


def gnuplot_pair(name: str, rows: Iterable[ResultRow]):
    """Data and script for a convergence plot: per-method mean value and theory against t."""
    blocks: Dict[str, Dict[float, List[ResultRow]]] = {}
    for row in rows:
        if row.value is None:
            continue
        blocks.setdefault(row.method, {}).setdefault(row.t, []).append(row)

    data = io.StringIO()
    methods = sorted(blocks)
    for method in methods:
        data.write(f"# {method}\n# t mean theory\n")
        for t in sorted(blocks[method]):
            group = blocks[method][t]
            mean = sum(r.value for r in group) / len(group)
            theory = group[0].theory
            data.write(f"{t!r} {mean!r} {'NaN' if theory is None else repr(theory)}\n")
        data.write("\n\n")

    plots = []
    for index, method in enumerate(methods):
        plots.append(f"'{name}.dat' index {index} using 1:2 with linespoints title '{method}'")
        plots.append(
            f"'{name}.dat' index {index} using 1:3 with lines dashtype 2 title '{method} theory'"
        )
    script = (
        "set terminal pngcairo size 900,600\n"
        f"set output '{name}.png'\n"
        "set xlabel 't'\n"
        f"set title '{name}'\n"
        "set key outside\n"
        + ("plot " + ", \\\n     ".join(plots) + "\n" if plots else "")
    )
    return data.getvalue(), script


class ResultStore:
    """Writes experiment outputs to a directory, optionally mirroring them to S3."""

    def __init__(self, out_dir, bucket: Optional[str] = None, prefix: Optional[str] = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.bucket_name = bucket if bucket is not None else os.getenv("RESULTS_BUCKET")
        self.prefix = prefix if prefix is not None else os.getenv("RESULTS_PREFIX", "results")
        self.s3_client = None

        if self.bucket_name:
            # Path-style addressing for LocalStack
            client_kwargs = {}
            endpoint_url = os.getenv("AWS_ENDPOINT_URL")
            if endpoint_url:
                client_kwargs["endpoint_url"] = endpoint_url
                client_kwargs["config"] = Config(
                    signature_version="s3v4", s3={"addressing_style": "path"}
                )
            self.s3_client = boto3.client("s3", **client_kwargs)
            logger.info(f"Mirroring results to s3://{self.bucket_name}/{self.prefix}")

    def _get_object_key(self, experiment: str, filename: str) -> str:
        return f"{self.prefix}/{experiment}/{filename}"

    def _mirror(self, experiment: str, path: Path, content_type: str) -> bool:
        if self.s3_client is None:
            return False
        key = self._get_object_key(experiment, path.name)
        try:
            self.s3_client.put_object(
                Bucket=self.bucket_name,
                Key=key,
                Body=path.read_bytes(),
                ContentType=content_type,
            )
            logger.info(f"Uploaded {path.name} to s3://{self.bucket_name}/{key}")
            return True
        except (ClientError, BotoCoreError) as e:
            logger.warning(f"Error uploading {key} to S3: {e}")
            return False

    def write_text(
        self, experiment: str, filename: str, text: str, content_type: str = "text/plain"
    ) -> Path:
        path = self.out_dir / filename
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote {path}")
        self._mirror(experiment, path, content_type)
        return path

    def write_rows(self, experiment: str, rows: List[ResultRow], fmt: str = "csv") -> Path:
        if fmt == "csv":
            return self.write_text(experiment, f"{experiment}.csv", emit_rows(rows), "text/csv")
        if fmt == "json":
            return self.write_text(
                experiment, f"{experiment}.json", emit_json(rows), "application/json"
            )
        raise ValueError(f"unsupported format {fmt!r}")

    def write_manifest(self, experiment: str, manifest: Dict[str, Any]) -> Path:
        return self.write_text(
            experiment,
            f"{experiment}.manifest.json",
            json.dumps(manifest, indent=2, sort_keys=True),
            "application/json",
        )

    def write_plot(self, experiment: str, rows: List[ResultRow]) -> List[Path]:
        data, script = gnuplot_pair(experiment, rows)
        return [
            self.write_text(experiment, f"{experiment}.dat", data),
            self.write_text(experiment, f"{experiment}.gp", script),
        ]
