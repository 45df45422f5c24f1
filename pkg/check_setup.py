"""
Setup check script
Run after installing requirements to confirm the toolkit imports and runs
"""

import sys
import tempfile
from pathlib import Path


def check_imports():
    """Check the third-party packages"""
    print("Checking imports...")

    packages = {
        "NumPy": "numpy",
        "Pillow": "PIL",
        "pandas": "pandas",
        "python-dotenv": "dotenv",
        "Matplotlib": "matplotlib",
        "pytest": "pytest",
    }
    optional = {"Matplotlib"}

    all_ok = True
    for name, module in packages.items():
        try:
            __import__(module)
            print(f"  {name}: ✓")
        except ImportError as e:
            if name in optional:
                print(f"  {name}: ✗ (Optional, loss curves disabled)")
            else:
                print(f"  {name}: ✗ FAILED: {e}")
                all_ok = False
    return all_ok


def check_modules():
    """Check the package modules import"""
    print("\nChecking package modules...")

    try:
        from modules import alignment, autodiff, cli, config, data_io  # noqa: F401
        from modules import extractor, fusion, losses, numerics, report_generator, training  # noqa: F401
        print("  All package modules: ✓")
        return True
    except Exception as e:
        print(f"  Package modules: ✗ Error: {e}")
        return False


def check_config():
    """Check config/settings.json parses into a valid run configuration"""
    print("\nChecking configuration...")

    try:
        from modules.config import SETTINGS_PATH, load_defaults

        if not SETTINGS_PATH.exists():
            print(f"  {SETTINGS_PATH}: ✗ Not found (built-in defaults will be used)")
            return False
        cfg = load_defaults()
        print(f"  {SETTINGS_PATH.name}: ✓ (image_size={cfg.image_size}, steps={cfg.steps})")
        return True
    except Exception as e:
        print(f"  Configuration: ✗ Error: {e}")
        return False


def check_forward_pass():
    """Run a narrow model on a 16x16 phantom"""
    print("\nChecking forward pass...")

    try:
        import numpy as np

        from modules.data_io import SynthPairSpec, make_lr, synth_pair
        from modules.fusion import FASRModel, ModelConfig, forward_full

        pair = synth_pair(SynthPairSpec(seed=0, size=16))
        model = FASRModel.init(ModelConfig(channels=(4, 8, 8), embed_dim=8, decoder_channels=8), seed=0)
        sr, diag = forward_full(model, make_lr(pair.t2, 4), pair.pd)

        if sr.shape == pair.t2.shape and np.array_equal(sr.value, np.clip(diag.inputs.lr_up, -1.0, 1.0)):
            print(f"  Forward pass: ✓ ({model.parameter_count()} parameters)")
            return True
        print("  Forward pass: ✗ Fresh model does not reproduce the bicubic input")
        return False
    except Exception as e:
        print(f"  Forward pass: ✗ Error: {e}")
        return False


def check_checkpoint():
    """Save and reload a checkpoint in a temporary directory"""
    print("\nChecking checkpoint I/O...")

    try:
        import numpy as np

        from modules.data_io import load_checkpoint, save_checkpoint

        records = {"sample.weight": np.arange(6, dtype=np.float32).reshape(2, 3)}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "sample.ftns"
            save_checkpoint(records, path)
            loaded = load_checkpoint(path)

        if np.array_equal(loaded["sample.weight"], records["sample.weight"]):
            print("  Checkpoint round trip: ✓")
            return True
        print("  Checkpoint round trip: ✗ Data mismatch")
        return False
    except Exception as e:
        print(f"  Checkpoint test: ✗ Error: {e}")
        return False


def main():
    """Run all checks"""
    print("=" * 60)
    print("FASR Desk - Setup Check")
    print("=" * 60)
    print()

    results = {
        "imports": check_imports(),
        "modules": check_modules(),
        "config": check_config(),
        "forward": check_forward_pass(),
        "checkpoint": check_checkpoint(),
    }

    print("\n" + "=" * 60)
    print("Check Summary")
    print("=" * 60)

    all_passed = all(results.values())
    if all_passed:
        print("✓ All checks passed!")
        print("\nTry a first run:")
        print("  python app.py synth --out runs/first")
        print("  python app.py train --steps 50 --out runs/first")
    else:
        failed = ", ".join(name for name, ok in results.items() if not ok)
        print(f"⚠ Some checks failed: {failed}. See the output above.")

    print("\n" + "=" * 60)
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
