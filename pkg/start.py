"""
Quick start script: runs the whole desk-scale pipeline on the synthetic dataset
"""

import subprocess
import sys
import os

DESK_CONFIG = os.path.join("config", "desk.json")
OUT_DIR = os.path.join("runs", "desk")

STAGES = [
    ("gen-data", []),
    ("prep-opa", []),
    ("init-weights", []),
    ("params", []),
    ("embed", ["--untrained"]),
    ("eval", []),
    ("train", []),
    ("embed", []),
    ("eval", []),
]


def check_dependencies():
    """Check that the runtime packages can be imported"""
    missing = []
    for module_name in ("numpy", "pydantic", "pydantic_settings", "dotenv", "PIL"):
        try:
            __import__(module_name)
        except ImportError:
            missing.append(module_name)
    if missing:
        print(f"❌ Missing packages: {', '.join(missing)}")
        print("   pip install -r requirements.txt")
        return False
    return True


def run_pipeline():
    """Run every stage with the desk configuration"""
    print("=" * 60)
    print("🚀 DVA Retrieval - desk run")
    print("=" * 60)

    if not check_dependencies():
        return 1

    for index, (command, extra) in enumerate(STAGES, start=1):
        print(f"\n[{index}/{len(STAGES)}] {command} {' '.join(extra)}")
        result = subprocess.run([
            sys.executable, "-m", "dva.main", command,
            "--config", DESK_CONFIG,
            "--out", OUT_DIR,
            *extra,
        ])
        if result.returncode != 0:
            print(f"\n❌ {command} failed with exit code {result.returncode}")
            return result.returncode

    print(f"\n✅ Done. Artifacts in {OUT_DIR}")
    return 0


if __name__ == "__main__":
    sys.exit(run_pipeline())
