"""Regenerate the golden fixtures consumed by the determinism tests.

Run from the repository root after an intentional numerical change:

    python3 tools/regen_goldens.py

The run functions live in tests/test_acceptance.py so the archive and
the replay can never drift apart; this script only executes them and
rewrites tests/golden/*.json with full float precision.
"""

import importlib.util
import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "tests" / "golden"


def _load_acceptance():
    spec = importlib.util.spec_from_file_location(
        "acceptance", ROOT / "tests" / "test_acceptance.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    mod = _load_acceptance()
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name, fn in (("protect", mod._golden_protect_run),
                     ("calibrate", mod._golden_calibrate_run)):
        payload = fn()
        path = GOLDEN / f"{name}.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
