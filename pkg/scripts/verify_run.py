import json
import sys
from pathlib import Path

# Get the project root directory
project_root = Path(__file__).parent.parent
sys.path.append(str(project_root))

from cli.main import PROCESSED, SUMMARY_FILE  # noqa: E402


def main(argv: list[str] | None = None) -> None:
    """Check that a compute run produced at least one profile.

    Exits with a non-zero status code if the summary is missing, unreadable,
    or reports no processed sounding.
    """
    args = sys.argv[1:] if argv is None else argv
    summary_file = Path(args[0]) if args else Path("out") / SUMMARY_FILE
    if not summary_file.exists():
        print(f"Error: Summary file not found at {summary_file}")
        sys.exit(1)

    try:
        with open(summary_file) as f:
            summary = json.load(f)
    except json.JSONDecodeError as e:
        print(f"Error: Could not parse {summary_file}: {e}")
        sys.exit(1)

    processed = summary.get(PROCESSED)
    if not isinstance(processed, int):
        print(f"Error: '{PROCESSED}' field missing in summary file.")
        sys.exit(1)

    if processed == 0:
        print(f"Error: No profile was computed ({summary.get('failed_parse', 0)} unparsable input(s)).")
        sys.exit(1)
    else:
        print(f"Run verification successful. {processed} profile(s) computed.")
        sys.exit(0)


if __name__ == "__main__":
    main()
