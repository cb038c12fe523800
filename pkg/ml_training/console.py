# [file name]: console.py
"""
Status output and the JSON run log.
- status lines go to stderr through a single rich Console
- run_log.json keeps a history of finished cells per output directory
"""

import json
import os
import sys
from datetime import datetime

from rich.console import Console
from tqdm import tqdm

console = Console(stderr=True, highlight=False)

_quiet = False


def set_quiet(quiet):
    """Silence status lines and progress bars (used by tests and --quiet)"""
    global _quiet
    _quiet = bool(quiet)


def status(message):
    if not _quiet:
        console.print(message)


def progress(total, description, initial=0):
    """Progress bar for long loops; disabled off-terminal"""
    return tqdm(
        total=total,
        initial=initial,
        desc=description,
        disable=_quiet or not sys.stderr.isatty(),
        leave=False,
        mininterval=1.0,
    )


class RunLog:
    """Append-only JSON log of cell outcomes inside an output directory"""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, "run_log.json")

    def _load(self):
        if os.path.exists(self.path):
            try:
                with open(self.path, 'r') as f:
                    return json.load(f)
            except (OSError, json.JSONDecodeError):
                status(f"⚠️ Run log unreadable, starting a new one: {self.path}")
        return {"cell_history": [], "created_at": datetime.now().isoformat()}

    def append(self, entry):
        data = self._load()
        entry = dict(entry)
        entry["timestamp"] = datetime.now().isoformat()
        data["cell_history"].append(entry)
        with open(self.path, 'w') as f:
            json.dump(data, f, indent=2)

    def history(self):
        return self._load()["cell_history"]
