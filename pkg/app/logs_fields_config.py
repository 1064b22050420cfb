"""Field layout of the JSON log records written during runs.

Records carry the run-id/subcommand/seed of the run that emitted them plus the
`props` passed through `extra=gen_props(...)`. Numeric props (losses, gate
fractions, timings) often arrive as numpy scalars or arrays and are converted
to plain JSON values here.
"""
import os
import socket
from datetime import datetime, timezone
from typing import Any

import json_logging
import numpy as np
from json_logging import util
from json_logging import JSONLogFormatter

from app.settings import settings

TIME_DIGITS = 6


def to_json_value(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): to_json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_json_value(v) for v in value]
    return value


def run_record_fields(record) -> dict:
    props = to_json_value(getattr(record, 'props', None) or {})
    if isinstance(props.get("execution_time"), float):
        props["execution_time"] = round(props["execution_time"], TIME_DIGITS)
    return props


def jsonlogformatter_format_log_object(self, record, request_util):
    json_log_object = super(JSONLogFormatter, self)._format_log_object(record, request_util)
    json_log_object.update({
        "message": record.getMessage(),
        "type": "run",
        "loggerName": record.name,
        "level": record.levelname,
        "fileName": record.module,
        "lineNumber": record.lineno,
        "pid": record.process,
    })
    json_log_object.update(run_record_fields(record))
    if record.exc_info or record.exc_text:
        json_log_object.update(self.get_exc_fields(record))
    return json_log_object


def basejsonformatter_format_log_object(self, record, request_util):
    now = datetime.now(timezone.utc)
    base_obj = {
        "writtenTime": util.iso_time_format(now),
        "hostName": socket.gethostname(),
        "component": settings.TITLE,
        "version": settings.VERSION,
        "cwd": os.getcwd(),
    }
    base_obj.update(self.base_object_common)
    return base_obj


def init_json_logger():
    json_logging.JSONLogFormatter._format_log_object = jsonlogformatter_format_log_object
    json_logging.BaseJSONFormatter._format_log_object = basejsonformatter_format_log_object
