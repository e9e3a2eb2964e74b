"""Validation script for chunkstream file-engine series."""

from __future__ import annotations

import sys
from pathlib import Path

from src.container import ContainerReader, list_containers, scan_container
from src.errors import ChunkstreamError, CorruptContainerError
from src.model import volume


def validate_container(path: Path) -> list[str]:
    """Check one container file.

    Checks:
    - Header magic and version, footer trailer and checksum.
    - Step indices strictly increase.
    - Every announcement decodes and its chunks fit their datasets.
    - Every payload block has ``volume * elem width`` bytes and lies in the file.

    Args:
        path: The ``data.<k>`` file to validate.

    Returns:
        Error messages; empty if the container is sound.
    """
    print(f"Validating {path}...")
    errors: list[str] = []
    try:
        reader = ContainerReader(path)
    except CorruptContainerError as exc:
        errors.append(str(exc))
        print(f"  ERROR: {exc}")
        try:
            recoverable = scan_container(path)
            print(f"  {len(recoverable)} steps recoverable by scanning")
        except ChunkstreamError:
            pass
        return errors

    size = path.stat().st_size
    blocks = 0
    with reader:
        steps = [e["step"] for e in reader.entries]
        if steps != sorted(set(steps)):
            errors.append(f"step indices not strictly increasing: {steps}")
        for step in reader.steps:
            try:
                announcement = reader.announcement(step)
            except ChunkstreamError as exc:
                errors.append(f"step {step}: {exc}")
                continue
            entry = reader.entry(step)
            if len(entry["blocks"]) != len(announcement.chunk_table):
                errors.append(
                    f"step {step}: {len(entry['blocks'])} blocks for "
                    f"{len(announcement.chunk_table)} chunks"
                )
                continue
            decls = announcement.decls
            for block, chunk in zip(entry["blocks"], announcement.chunk_table, strict=True):
                expected = volume(chunk.region) * decls[chunk.dataset].width
                if block["length"] != expected:
                    errors.append(
                        f"step {step}: {chunk.dataset} block has {block['length']} bytes, "
                        f"expected {expected}"
                    )
                if block["pos"] + block["length"] > size:
                    errors.append(f"step {step}: {chunk.dataset} block runs past end of file")
                blocks += 1

    for err in errors[:20]:
        print(f"  ERROR: {err}")
    if len(errors) > 20:
        print(f"  ... and {len(errors) - 20} more errors")
    print(f"  Steps: {len(reader.steps)}, blocks: {blocks}, size: {size / 1024:.0f} KB")
    return errors


def validate_series(directory: Path) -> bool:
    """Validate every container of a series and check they record the same steps.

    Returns:
        ``True`` if all checks pass, ``False`` otherwise.
    """
    paths = list_containers(directory)
    if not paths:
        print(f"No containers under {directory}")
        return False
    ok = True
    step_sets: dict[Path, list[int]] = {}
    for path in paths:
        if validate_container(path):
            ok = False
            continue
        with ContainerReader(path) as reader:
            step_sets[path] = reader.steps
    if len({tuple(s) for s in step_sets.values()}) > 1:
        print("  ERROR: containers disagree on the recorded steps")
        ok = False
    print(f"\n  Summary: {len(paths)} containers, {'ok' if ok else 'errors found'}")
    return ok


def main(argv: list[str] | None = None) -> None:
    """Validate each series directory given on the command line.

    Exits with code 1 if any check fails, code 0 if all pass.
    """
    args = sys.argv[1:] if argv is None else argv
    if not args:
        print("usage: chunkstream-validate SERIES_DIR [SERIES_DIR ...]")
        sys.exit(2)

    ok = True
    for arg in args:
        if not validate_series(Path(arg)):
            ok = False

    if not ok:
        print("\nValidation FAILED")
        sys.exit(1)
    else:
        print("\nValidation PASSED")


if __name__ == "__main__":
    main()
