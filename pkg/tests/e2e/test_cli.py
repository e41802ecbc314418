import csv
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import boto3
from botocore.config import Config


def _run(*args, out_dir, env=None):
    """Run the installed CLI as a user would and return the completed process."""
    command = [sys.executable, "-m", "bbm_sausage", *args, "--out", str(out_dir)]
    merged = {**os.environ, "LOG_LEVEL": "WARNING", **(env or {})}
    return subprocess.run(command, capture_output=True, text=True, env=merged, timeout=600)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_population_growth_end_to_end():
    """A quick population run writes sorted rows, a manifest and a gnuplot pair"""
    with tempfile.TemporaryDirectory() as tmp:
        result = _run(
            "population_growth", "--t-grid", "1,2,3", "--seeds", "20", "--workers", "2",
            out_dir=tmp,
        )
        assert result.returncode == 0, result.stderr

        rows = _rows(Path(tmp) / "population_growth.csv")
        keys = [(float(r["t"]), int(r["seed"]), r["method"]) for r in rows]
        assert keys == sorted(keys)
        assert any(r["method"] == "log-slope" for r in rows)

        manifest = json.loads((Path(tmp) / "population_growth.manifest.json").read_text())
        assert manifest["t_grid"] == [1.0, 2.0, 3.0]
        assert (Path(tmp) / "population_growth.dat").exists()


def test_rerun_is_bit_identical():
    """Same seed and grid give byte-identical CSV files"""
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        args = ("d1_law", "--t-grid", "1,2", "--seeds", "3", "--r0", "2", "--dt", "0.01")
        assert _run(*args, out_dir=a).returncode == 0
        assert _run(*args, "--workers", "3", out_dir=b).returncode == 0
        assert (Path(a) / "d1_law.csv").read_bytes() == (Path(b) / "d1_law.csv").read_bytes()


def test_budget_exit_code():
    """An oversized run exits with code 2 and still writes its rows"""
    with tempfile.TemporaryDirectory() as tmp:
        result = _run("population_growth", "--max-points", "50", out_dir=tmp)
        assert result.returncode == 2
        rows = _rows(Path(tmp) / "population_growth.csv")
        assert rows and all(r["method"] == "budget-exceeded" for r in rows)


def test_invalid_config_exit_code():
    with tempfile.TemporaryDirectory() as tmp:
        result = _run("sausage_scaling", "--dt", "5.0", "--t-grid", "2", out_dir=tmp)
        assert result.returncode == 1


def test_results_mirrored_to_s3():
    """With RESULTS_BUCKET and a LocalStack endpoint the CSV lands in the bucket"""
    bucket = os.getenv("RESULTS_BUCKET")
    endpoint = os.getenv("AWS_ENDPOINT_URL")
    if not (bucket and endpoint):
        print("RESULTS_BUCKET/AWS_ENDPOINT_URL not set; skipping S3 mirror check")
        return

    with tempfile.TemporaryDirectory() as tmp:
        result = _run(
            "population_growth", "--t-grid", "1,2", "--seeds", "5",
            out_dir=tmp, env={"RESULTS_PREFIX": "e2e"},
        )
        assert result.returncode == 0, result.stderr

    s3 = boto3.client(
        "s3",
        endpoint_url=endpoint,
        config=Config(signature_version="s3v4", s3={"addressing_style": "path"}),
    )
    listing = s3.list_objects_v2(Bucket=bucket, Prefix="e2e/population_growth/")
    keys = {item["Key"] for item in listing.get("Contents", [])}
    assert "e2e/population_growth/population_growth.csv" in keys


if __name__ == "__main__":
    test_population_growth_end_to_end()
    test_rerun_is_bit_identical()
    test_budget_exit_code()
    test_invalid_config_exit_code()
    test_results_mirrored_to_s3()
