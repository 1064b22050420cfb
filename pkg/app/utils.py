import hashlib
import json
import secrets
from typing import Any, Dict, Iterable, Optional


def generate_run_id() -> str:
    return secrets.token_hex(16)


def gen_props(context: Optional[Dict[str, str]] = None, **kwargs) -> Dict[str, Dict[str, Any]]:
    if context is None:
        context = {}
    return {
        "props": {"run-id": context.get("run-id", ""), "subcommand": context.get("subcommand"),
                  "seed": context.get("seed"), **kwargs}
    }


def gen_context(subcommand: str = None, seed: Optional[int] = None, run_id: Optional[str] = None) -> Dict[str, Any]:
    return {
        "run-id": run_id or generate_run_id(),
        "subcommand": subcommand or "NA",
        "seed": seed,
    }


def canonical_json(obj: Any) -> str:
    """JSON text with sorted keys and no whitespace variance, used for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of(obj: Any) -> str:
    if isinstance(obj, bytes):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_of_indices(indices: Iterable[int]) -> str:
    return sha256_of(sorted(int(i) for i in indices))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
