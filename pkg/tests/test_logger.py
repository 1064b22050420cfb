import logging
from logging.handlers import RotatingFileHandler

import numpy as np

from app.logger import init_logger
from app.logs_fields_config import run_record_fields, to_json_value
from app.settings import settings
from app.utils import gen_context, gen_props


def test_numpy_props_become_plain_values():
    value = to_json_value({"loss": np.float64(0.5), "fractions": np.array([0.25, 1.0]), "steps": (np.int64(3),)})
    assert value == {"loss": 0.5, "fractions": [0.25, 1.0], "steps": [3]}
    assert type(value["loss"]) is float


def test_record_fields_carry_run_context():
    context = gen_context("search", seed=7, run_id="abc")
    record = logging.LogRecord("app.bilevel", logging.INFO, __file__, 1, "step", None, None)
    record.props = gen_props(context, operation="search", execution_time=0.1234567891)["props"]
    fields = run_record_fields(record)
    assert fields["run-id"] == "abc"
    assert fields["subcommand"] == "search"
    assert fields["seed"] == 7
    assert fields["execution_time"] == 0.123457


def test_record_without_props():
    record = logging.LogRecord("app", logging.INFO, __file__, 1, "plain", None, None)
    assert run_record_fields(record) == {}


def test_init_logger_adds_one_file_handler_per_directory(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "LOG_JSON", False)
    root = logging.getLogger()
    before = list(root.handlers)
    try:
        init_logger("nfs-test", str(tmp_path))
        init_logger("nfs-test", str(tmp_path))
        added = [h for h in root.handlers if h not in before]
        assert len(added) == 1 and isinstance(added[0], RotatingFileHandler)
        logging.getLogger("app.test").warning("written")
        added[0].flush()
        assert "written" in (tmp_path / "nfs-test.log").read_text()
    finally:
        for handler in [h for h in root.handlers if h not in before]:
            root.removeHandler(handler)
            handler.close()
