"""Parameter checkpoints as FITS containers.

Layout: the primary HDU carries no data; its header holds ``FASTARCK`` (the
format version) plus run metadata (``STEP``, ``SEED``, ``CKPTID``). Each array
record follows as an ``ImageHDU`` whose ``EXTNAME`` is the record name, in
insertion order. Record names are grouped by prefix (``param/``, ``ema/``,
``adam_m/``, ``adam_v/``).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import numpy as np
from astropy.io import fits

from fastar_lab.exceptions import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
VERSION_KEY = "FASTARCK"
STRUCTURAL_KEYS = ("SIMPLE", "BITPIX", "NAXIS", "EXTEND", VERSION_KEY)


def save_records(
    path: str | Path, records: Mapping[str, np.ndarray], meta: Mapping[str, int | float | str] | None = None
) -> Path:
    """Write ordered (name, shape, values) records plus metadata."""
    path = Path(path)
    header = fits.Header()
    header[VERSION_KEY] = (FORMAT_VERSION, "fastar-lab checkpoint format version")
    for key, value in (meta or {}).items():
        header[key.upper()[:8]] = value
    hdus = [fits.PrimaryHDU(header=header)]
    for name, values in records.items():
        hdu = fits.ImageHDU(data=np.ascontiguousarray(values), name=name)
        hdu.header["RECNAME"] = name
        hdus.append(hdu)
    path.parent.mkdir(parents=True, exist_ok=True)
    fits.HDUList(hdus).writeto(path, overwrite=True)
    logger.info("Wrote checkpoint %s (%d records)", path, len(records))
    return path


def load_records(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, int | float | str]]:
    """Read a checkpoint back into native-endian arrays and its metadata."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    with fits.open(path, memmap=False) as hdul:
        header = hdul[0].header
        version = header.get(VERSION_KEY)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format version {version!r}")
        meta = {key.lower(): header[key] for key in header if key not in STRUCTURAL_KEYS}
        records = {}
        for hdu in hdul[1:]:
            name = hdu.header.get("RECNAME", hdu.name)
            data = hdu.data if hdu.data is not None else np.zeros(0)
            records[name] = np.asarray(data).astype(data.dtype.newbyteorder("="))
    return records, meta


def group(records: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """The sub-mapping of records under ``prefix/``, with the prefix stripped."""
    head = f"{prefix}/"
    return {name[len(head):]: values for name, values in records.items() if name.startswith(head)}


def prefixed(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": values for name, values in arrays.items()}
