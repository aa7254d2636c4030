"""Run every countlab subcommand and check the 0 / 1 / 2 exit-code contract."""
import subprocess
import sys
import tempfile
from pathlib import Path

OK, VALIDATION, RUNTIME = 0, 1, 2


def main() -> int:
    cli, config = sys.argv[1:3]
    failures = 0

    def expect(code, *args):
        nonlocal failures
        got = subprocess.run([cli, *args], capture_output=True, text=True)
        status = "ok" if got.returncode == code else "FAILED"
        print(f"{status}: exit {got.returncode} (want {code}) for {' '.join(args)}")
        if got.returncode != code:
            failures += 1
            print(got.stdout, got.stderr)

    with tempfile.TemporaryDirectory() as tmp:
        t = Path(tmp)
        c = ["-c", config]
        expect(OK, "generate", *c, "-o", str(t / "train.jsonl"))
        expect(OK, "generate", *c, "--which", "grounding", "-o", str(t / "grounding.jsonl"))
        expect(OK, "split", *c, "-s", "split.p=90", "-o", str(t / "split"))
        expect(OK, "train", *c, "-o", str(t / "model"))
        expect(OK, "eval", *c, "--checkpoint", str(t / "model" / "checkpoint.json"), "-o", str(t / "eval"))
        expect(OK, "sweep", *c, "-o", str(t / "sweep"))
        expect(OK, "grounding", *c, "-o", str(t / "grounding"))
        expect(OK, "report", *c, "-o", str(t / "report"))
        expect(OK, "--help")

        # Validation failures: bad arguments, bad configuration, mismatched checkpoint.
        expect(VALIDATION)
        expect(VALIDATION, "train", *c)
        expect(VALIDATION, "frobnicate")
        expect(VALIDATION, "report", *c, "-s", "split.p=150", "-o", str(t / "bad"))
        expect(VALIDATION, "report", *c, "-s", "no.such.key=1", "-o", str(t / "bad"))
        expect(VALIDATION, "report", "-c", str(t / "missing.cfg"), "-o", str(t / "bad"))
        expect(VALIDATION, "generate", *c, "--which", "everything", "-o", str(t / "x.jsonl"))
        expect(VALIDATION, "eval", *c, "-s", "model.hidden_dim=5", "--checkpoint",
               str(t / "model" / "checkpoint.json"), "-o", str(t / "bad"))

        # Runtime failures: unreadable inputs and failing stages.
        (t / "garbage.json").write_text("{not json")
        expect(RUNTIME, "eval", *c, "--checkpoint", str(t / "garbage.json"), "-o", str(t / "bad"))
        expect(RUNTIME, "sweep", *c, "-s", "data.test_size=0", "-o", str(t / "bad_sweep"))
        (t / "blocker").write_text("a file, not a directory")
        expect(RUNTIME, "report", *c, "-o", str(t / "blocker" / "out"))
    print(f"{failures} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
