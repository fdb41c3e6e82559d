"""
Batch Runner for kegraph experiments
Runs the train command several times with different modes, seeds and config
overrides, then aggregates every metrics.json into one comparison table.

Usage:
  With uv (recommended):
    uv run python run_batch.py

  With pip/venv (legacy):
    source .venv/bin/activate  # or .venv\Scripts\activate on Windows
    python run_batch.py
"""

import json
import subprocess
import sys
from pathlib import Path


PROJECT_ROOT = Path(__file__).parent


def load_inputs():
    """Load the inputs.json file."""
    inputs_path = PROJECT_ROOT / "inputs.json"
    with open(inputs_path, 'r', encoding='utf-8') as f:
        return json.load(f)


def build_command(batch, results_dir):
    """Turn one batch entry into a ``python -m kegraph train`` command line."""
    command = [sys.executable, "-m", "kegraph", "train", "--mode", batch["mode"],
               "--out", str(results_dir / batch["name"])]
    if batch.get("seeds"):
        command += ["--seeds"] + [str(seed) for seed in batch["seeds"]]
    for key, value in batch.get("overrides", {}).items():
        command += ["--set", f"{key}={json.dumps(value)}"]
    return command


def run_command(title, command):
    """Run one kegraph command with live output."""
    print("\n" + "="*70)
    print(f"RUNNING {title.upper()}")
    print("="*70 + "\n")
    print(" ".join(command) + "\n")

    result = subprocess.run(command, cwd=str(PROJECT_ROOT), capture_output=False)
    return result.returncode == 0


def main():
    """Main function to batch process experiments."""

    # =========================================================================
    # CONFIGURATION - Edit this section to customize your batch processing
    # =========================================================================

    results_dir = PROJECT_ROOT / "results" / "batch"

    # Robustness comparison on the default noisy synthetic dataset
    batch_configs = [
        {"name": "full", "mode": "full", "seeds": [0, 1, 2, 3, 4]},
        {"name": "wo_robust", "mode": "wo_robust", "seeds": [0, 1, 2, 3, 4]},
    ]

    # Information overload: fraud signal only in support-node attributes
    # batch_configs = [
    #     {"name": "support_full", "mode": "full",
    #      "overrides": {"synth.signal_location": "support"}},
    #     {"name": "support_wo_ke", "mode": "wo_ke",
    #      "overrides": {"synth.signal_location": "support"}},
    # ]

    # Full ablation grid:
    # batch_configs = [{"name": mode, "mode": mode} for mode in
    #                  ["full", "wo_ke", "wo_attr", "wo_attn", "wo_robust", "mwgcn_sum"]]

    # =========================================================================
    # END CONFIGURATION
    # =========================================================================

    print("\n" + "="*70)
    print("BATCH RUNNER - KEGRAPH EXPERIMENTS")
    print("="*70)

    inputs = load_inputs()
    print("\nBase configuration (inputs.json):")
    for section, values in inputs.items():
        print(f"  [{section}]")
        for key, value in values.items():
            print(f"    {key}: {value}")

    # Show summary
    print("\n" + "="*70)
    print(f"BATCH SUMMARY - {len(batch_configs)} batches")
    print("="*70)
    for i, batch in enumerate(batch_configs, 1):
        print(f"\nBatch {i}: {batch['name']}")
        print(f"  mode: {batch['mode']}")
        if batch.get("seeds"):
            print(f"  seeds: {batch['seeds']}")
        for key, value in batch.get("overrides", {}).items():
            print(f"  {key}: {value} ⬅ CHANGED")

    print(f"\nStarting batch processing...")
    print("="*70)

    successful_batches = 0
    failed_batches = 0

    for batch_num, batch in enumerate(batch_configs, 1):
        print("\n" + "="*70)
        print(f"BATCH {batch_num} of {len(batch_configs)}")
        print("="*70)

        success = run_command(f"{batch['name']} ({batch['mode']})", build_command(batch, results_dir))

        if success:
            successful_batches += 1
            print(f"\n✅ Batch {batch_num} completed successfully!")
        else:
            failed_batches += 1
            print(f"\n❌ Batch {batch_num} failed!")

            # Continue automatically to next batch
            print("Continuing with remaining batches...")

    if successful_batches:
        run_command("report", [sys.executable, "-m", "kegraph", "report", str(results_dir),
                               "--out", str(results_dir / "report.csv")])

    # Summary
    print("\n" + "="*70)
    print("BATCH PROCESSING SUMMARY")
    print("="*70)
    print(f"Total Batches Attempted: {len(batch_configs)}")
    print(f"Successful: {successful_batches}")
    print(f"Failed: {failed_batches}")
    print("="*70 + "\n")


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\n\nBatch processing interrupted by user.")
        sys.exit(1)
    except Exception as e:
        print(f"\n\nError: {e}")
        sys.exit(1)
