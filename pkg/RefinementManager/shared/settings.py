import copy
import json
import os
import re
from pathlib import Path
from typing import Any, Dict, Optional

import psutil
from dotenv import load_dotenv


APP_DIR = Path(__file__).resolve().parents[1]
REPO_ROOT = APP_DIR.parent
DEFAULT_SETTINGS = APP_DIR / "config" / "settings.json"

DEFAULTS: Dict[str, Any] = {
    "logging": {"dir": "", "level": "WARNING", "max_bytes": 5 * 1024 * 1024, "backup_count": 5},
    "oracle": {"samples": 200_000, "workers": 0},
    "control": {"lookahead_samples": 64},
    "output": {"digits": 7},
}

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class SettingsError(ValueError):
    pass


def expand_env(s: Any) -> Any:
    """Expand ${VARS} inside strings using os.environ (missing vars -> "")."""
    if isinstance(s, dict):
        return {k: expand_env(v) for k, v in s.items()}
    if isinstance(s, list):
        return [expand_env(v) for v in s]
    if not isinstance(s, str):
        return s
    return _ENV_RE.sub(lambda m: os.getenv(m.group(1), ""), s)


def _merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        elif v != "" or k not in out:
            out[k] = v
    return out


def _as_int(cfg: Dict[str, Any], section: str, key: str) -> None:
    raw = cfg[section][key]
    try:
        cfg[section][key] = int(raw)
    except (TypeError, ValueError):
        raise SettingsError(f"{section}.{key} must be an integer (got {raw!r})") from None


def load_settings(path: Optional[Path] = None, env_file: Optional[Path] = None) -> Dict[str, Any]:
    """settings.json merged over DEFAULTS, after loading .env and expanding ${VARS}.

    Empty strings (an unset ${VAR}) keep the default.
    """
    env_path = env_file if env_file is not None else REPO_ROOT / ".env"
    if env_path.exists():
        load_dotenv(env_path)

    p = Path(path) if path is not None else DEFAULT_SETTINGS
    if path is not None and not p.exists():
        raise SettingsError(f"settings file not found: {p}")
    raw: Dict[str, Any] = {}
    if p.exists():
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise SettingsError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise SettingsError(f"{p}: top level must be an object")

    cfg = _merge(DEFAULTS, expand_env(raw))
    for section, key in (("oracle", "samples"), ("oracle", "workers"), ("control", "lookahead_samples"), ("output", "digits")):
        _as_int(cfg, section, key)
    return cfg


def resolve_workers(cfg: Dict[str, Any]) -> int:
    """oracle.workers; 0 means one per physical core."""
    n = int(cfg.get("oracle", {}).get("workers") or 0)
    if n > 0:
        return n
    return psutil.cpu_count(logical=False) or 1
