import os
import sys
import tempfile
from datetime import datetime

from rana_compress.cli import main


# End-to-end smoke run on a toy SwiGLU MLP: build the fixture, compress it to half
# its FLOPs, then compare RaNA against the baselines on held-out inputs.
if "RANA_THREADS" not in os.environ:
    os.environ["RANA_THREADS"] = "2"

print(f"\n--- Running rana-compress locally at {datetime.now()} ---")

if __name__ == "__main__":
    work = tempfile.mkdtemp(prefix="rana-")
    steps = [
        ["toy", "--kind", "swiglu", "--out", f"{work}/toy"],
        ["compress", f"{work}/toy", "--budget", "0.5", "--out", f"{work}/adapted"],
        ["eval", f"{work}/adapted", "--out", f"{work}/errors.csv"],
        ["hist", f"{work}/toy", "--out", f"{work}/hist.csv"],
    ]
    for step in steps:
        print(f"\n$ rana {' '.join(step)}")
        code = main(step)
        if code != 0:
            print(f"Error: step '{step[0]}' exited with {code}", file=sys.stderr)
            sys.exit(code)
    print(f"\nArtifacts written to {work}")
