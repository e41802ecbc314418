import json
import math

import pytest
from botocore.exceptions import ClientError

from bbm_sausage import storage
from bbm_sausage.storage import (
    CSV_COLUMNS,
    ResultRow,
    ResultStore,
    emit_json,
    emit_rows,
    gnuplot_pair,
    parse_rows,
)


class FakeS3:
    def __init__(self, fail=False):
        self.objects = {}
        self.fail = fail

    def put_object(self, Bucket, Key, Body, ContentType):
        if self.fail:
            raise ClientError({"Error": {"Code": "500", "Message": "boom"}}, "PutObject")
        self.objects[(Bucket, Key)] = (Body, ContentType)


@pytest.fixture
def rows():
    return [
        ResultRow.measured("demo", 8.0, 1, "inner", 5.5, 0.1, 2.0),
        ResultRow.measured("demo", 6.0, 0, "outer", 4.0, None, 0.0),
        ResultRow.measured("demo", 6.0, 0, "inner", 3.0, 0.2, 2.0),
        ResultRow("demo", 10.0, 2, "budget-exceeded"),
    ]


def test_ratio_only_with_nonzero_theory(rows):
    assert rows[0].ratio == pytest.approx(2.75)
    assert rows[1].ratio is None
    assert rows[3].value is None


def test_emit_rows_sorted_with_header(rows):
    lines = emit_rows(rows).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    keys = [line.split(",")[1:4] for line in lines[1:]]
    assert keys == [
        ["6.0", "0", "inner"],
        ["6.0", "0", "outer"],
        ["8.0", "1", "inner"],
        ["10.0", "2", "budget-exceeded"],
    ]
    assert lines[-1].endswith(",,,,")


def test_parse_rows_restores_values(rows):
    parsed = parse_rows(emit_rows(rows))
    assert sorted(rows, key=ResultRow.sort_key) == parsed


def test_parse_rows_keeps_full_precision():
    row = ResultRow.measured("demo", 0.1 + 0.2, 3, "inner", 1.0 / 3.0, 1e-17, math.pi)
    (parsed,) = parse_rows(emit_rows([row]))
    assert parsed == row


def test_parse_rows_rejects_foreign_header():
    with pytest.raises(ValueError):
        parse_rows("a,b,c\n1,2,3\n")


def test_emit_json(rows):
    records = json.loads(emit_json(rows))
    assert [r["t"] for r in records] == [6.0, 6.0, 8.0, 10.0]
    assert records[-1]["value"] is None


def test_gnuplot_pair(rows):
    data, script = gnuplot_pair("demo", rows)
    assert "# inner" in data
    assert "6.0 3.0 2.0" in data
    assert "8.0 5.5 2.0" in data
    assert "budget-exceeded" not in data
    assert "set output 'demo.png'" in script
    assert "'demo.dat' index 0" in script


def test_store_writes_locally(tmp_path, rows, monkeypatch):
    monkeypatch.delenv("RESULTS_BUCKET", raising=False)
    store = ResultStore(tmp_path / "out")
    assert store.s3_client is None
    csv_path = store.write_rows("demo", rows)
    json_path = store.write_rows("demo", rows, "json")
    manifest = store.write_manifest("demo", {"root_seed": 7})
    plots = store.write_plot("demo", rows)
    assert csv_path.read_text().startswith("experiment,t,seed")
    assert json.loads(json_path.read_text())[0]["method"] == "inner"
    assert json.loads(manifest.read_text()) == {"root_seed": 7}
    assert [p.name for p in plots] == ["demo.dat", "demo.gp"]
    with pytest.raises(ValueError):
        store.write_rows("demo", rows, "xml")


def test_store_mirrors_to_s3(tmp_path, rows, monkeypatch):
    """With RESULTS_BUCKET set every written file is uploaded under prefix/experiment/."""
    fake = FakeS3()
    monkeypatch.setenv("RESULTS_BUCKET", "results-bucket")
    monkeypatch.setenv("RESULTS_PREFIX", "runs")
    monkeypatch.setattr(storage.boto3, "client", lambda *args, **kwargs: fake)
    store = ResultStore(tmp_path)
    store.write_rows("demo", rows)
    assert ("results-bucket", "runs/demo/demo.csv") in fake.objects
    body, content_type = fake.objects[("results-bucket", "runs/demo/demo.csv")]
    assert content_type == "text/csv"
    assert body == (tmp_path / "demo.csv").read_bytes()


def test_store_passes_endpoint_for_localstack(tmp_path, monkeypatch):
    seen = {}

    def fake_client(service, **kwargs):
        seen["service"] = service
        seen.update(kwargs)
        return FakeS3()

    monkeypatch.setenv("AWS_ENDPOINT_URL", "http://localstack:4566")
    monkeypatch.setattr(storage.boto3, "client", fake_client)
    ResultStore(tmp_path, bucket="b")
    assert seen["service"] == "s3"
    assert seen["endpoint_url"] == "http://localstack:4566"


def test_upload_failure_keeps_local_file(tmp_path, rows, monkeypatch):
    monkeypatch.setattr(storage.boto3, "client", lambda *args, **kwargs: FakeS3(fail=True))
    store = ResultStore(tmp_path, bucket="b", prefix="p")
    path = store.write_rows("demo", rows)
    assert path.exists()
