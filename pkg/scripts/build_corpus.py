#!/usr/bin/env python3
"""
Synthetic corpus build script.

Usage: python scripts/build_corpus.py [CONFIG_FILE] [--section.key=value ...]
"""

import sys
import os

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config import configure_logging, load_experiment_config, parse_override_args, resolve_data_root
from src.exceptions import T2Error
from src.services.synthlight_service import build_corpus, verify_corpus


def main():
    """Build the corpus and re-verify every written file."""
    args = sys.argv[1:]
    config_path = args[0] if args and not args[0].startswith("--") else None
    overrides = args[1:] if config_path else args
    configure_logging()

    try:
        config = load_experiment_config(config_path, parse_override_args(overrides))
        root = resolve_data_root(config)
        print(f"🔧 Building synthetic low-light corpus in {root} ...")
        manifest = build_corpus(config.synth, root)
        mismatched = verify_corpus(root)
    except T2Error as e:
        print(f"❌ Error building corpus: {e}")
        sys.exit(e.exit_code)

    if mismatched:
        print(f"❌ {len(mismatched)} files do not match the manifest")
        sys.exit(2)
    print("✅ Corpus built successfully!")
    print("📊 Splits:")
    for name, ids in manifest["splits"].items():
        print(f"   - {name}: {len(ids)} images")
    print(f"\n💡 Next: python -m src.cli train --data {root}")


if __name__ == "__main__":
    main()
