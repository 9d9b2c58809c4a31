import subprocess
import sys
import os

ROOT = os.path.dirname(os.path.abspath(__file__))

SWEEPS = [
    # name, extra args
    ("fault_free", ["--random", "1000", "--seed", "1", "--max-groups", "8", "--max-instances", "8", "--max-faults", "0"]),
    ("faulty", ["--random", "1000", "--seed", "2"]),
    ("request_first", ["--random", "300", "--seed", "3", "--recovery-order", "request-first"]),
]


def cmd(name, args):
    out = os.path.join("data", f"{name}_summary.csv")
    return [sys.executable, "-m", "orch.cli", "simulate", *args, "--summary-out", out]


def run(name, args):
    print(f"running {name}...")
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (os.path.join(ROOT, "src"), env.get("PYTHONPATH", "")) if p)
    try:
        res = subprocess.run(cmd(name, args), cwd=ROOT, env=env, check=True, capture_output=True, text=True)
        print(res.stdout)
        print(f"ok {name}")
    except subprocess.CalledProcessError as e:
        print(f"error {name}:")
        print(e.stdout)
        print(e.stderr)
        sys.exit(1)


def main(names=None):
    print("starting acceptance sweeps...")
    os.makedirs(os.path.join(ROOT, "data"), exist_ok=True)

    for name, args in SWEEPS:
        if names and name not in names:
            continue
        run(name, args)

    print("\nall done.")


if __name__ == "__main__":
    main(sys.argv[1:])
