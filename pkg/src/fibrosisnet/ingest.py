"""CT slice and clinical-metadata ingestion.

Only a small subset of DICOM is understood: explicit-VR little-endian
elements following the 128-byte preamble and ``DICM`` magic.  That is
enough to recover the pixel matrix, rescale parameters and slice
position, which is all the rest of the pipeline needs.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    BadEnum,
    BadHeader,
    DimensionMismatch,
    DuplicateZ,
    MissingMagic,
    NonNumericField,
    PixelLengthMismatch,
    TruncatedElement,
    UnsupportedBitsAllocated,
)

log = logging.getLogger(__name__)

PREAMBLE_LEN = 128
MAGIC = b"DICM"

# (group, element) tags read by the parser
TAG_SOP_INSTANCE_UID = (0x0008, 0x0018)
TAG_IMAGE_POSITION = (0x0020, 0x0032)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLUMNS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

# VRs whose header carries 2 reserved bytes and a u32 length
LONG_VRS = {b"OB", b"OW", b"OF", b"OD", b"OL", b"OV", b"SQ", b"UC", b"UN", b"UR", b"UT", b"SV", b"UV"}
UNDEFINED_LENGTH = 0xFFFFFFFF

CSV_HEADER = ["Patient", "Weeks", "FVC", "Percent", "Age", "Sex", "SmokingStatus"]


class Sex(enum.Enum):
    MALE = "Male"
    FEMALE = "Female"


class Smoking(enum.Enum):
    CURRENTLY_SMOKES = "Currently smokes"
    EX_SMOKER = "Ex-smoker"
    NEVER_SMOKED = "Never smoked"


@dataclass(frozen=True, eq=False)
class CtSlice:
    """One axial CT image with raw stored values.

    ``pixels`` is a ``(rows, cols)`` int16 array; HU are recovered as
    ``pixels * rescale_slope + rescale_intercept``.
    """

    rows: int
    cols: int
    pixels: np.ndarray
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    z_position: float = 0.0
    source_id: str = ""

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DimensionMismatch(f"rows/cols must be >= 1, got {self.rows}x{self.cols}")
        pixels = np.asarray(self.pixels)
        if pixels.size != self.rows * self.cols:
            raise PixelLengthMismatch(
                f"{pixels.size} pixels for a {self.rows}x{self.cols} slice"
            )
        if self.rescale_slope == 0:
            raise ValueError("rescale_slope must be non-zero")
        object.__setattr__(self, "pixels", pixels.astype(np.int16, copy=False).reshape(self.rows, self.cols))

    def __eq__(self, other):
        if not isinstance(other, CtSlice):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.rescale_slope == other.rescale_slope
            and self.rescale_intercept == other.rescale_intercept
            and self.z_position == other.z_position
            and self.source_id == other.source_id
            and np.array_equal(self.pixels, other.pixels)
        )

    def __repr__(self):
        return (
            f"CtSlice({self.rows}x{self.cols}, z={self.z_position}, "
            f"slope={self.rescale_slope}, intercept={self.rescale_intercept})"
        )


@dataclass(frozen=True)
class CtVolume:
    patient_id: str
    slices: tuple

    @property
    def shape(self):
        first = self.slices[0]
        return len(self.slices), first.rows, first.cols

    @property
    def z_positions(self):
        return [s.z_position for s in self.slices]


@dataclass(frozen=True)
class Visit:
    week: int
    fvc_ml: float
    percent: float


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple
    age: float
    sex: Sex
    smoking: Smoking

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        weeks = [v.week for v in self.visits]
        if any(b <= a for a, b in zip(weeks, weeks[1:])):
            raise ValueError(f"patient {self.patient_id}: visit weeks must be strictly increasing")
        if any(v.fvc_ml <= 0 for v in self.visits):
            raise ValueError(f"patient {self.patient_id}: FVC must be positive")

    @property
    def baseline(self) -> Visit:
        return self.visits[0]


# ----------------------------------------------------------------- DICOM


def _parse_ds(raw: bytes) -> list[float]:
    text = raw.decode("ascii").strip(" \x00")
    if not text:
        return []
    return [float(part) for part in text.split("\\")]


def _read_elements(buf: bytes, offset: int):
    """Yield ``(tag, vr, value)`` for every element after the magic."""
    n = len(buf)
    while offset < n:
        if offset + 8 > n:
            raise TruncatedElement(f"element header truncated at byte {offset}")
        group, elem = struct.unpack_from("<HH", buf, offset)
        vr = buf[offset + 4 : offset + 6]
        if vr in LONG_VRS:
            if offset + 12 > n:
                raise TruncatedElement(f"long element header truncated at byte {offset}")
            (length,) = struct.unpack_from("<I", buf, offset + 8)
            start = offset + 12
        else:
            (length,) = struct.unpack_from("<H", buf, offset + 6)
            start = offset + 8
        if length == UNDEFINED_LENGTH:
            raise TruncatedElement(f"undefined-length element ({group:04X},{elem:04X}) is not supported")
        end = start + length
        if end > n:
            raise TruncatedElement(
                f"element ({group:04X},{elem:04X}) declares {length} bytes, {n - start} available"
            )
        yield (group, elem), vr, buf[start:end]
        offset = end


def parse_dicom_slice(data: bytes) -> CtSlice:
    """Parse a single-frame explicit-VR little-endian slice.

    Unknown elements are skipped by their declared length.  A missing
    RescaleSlope defaults to 1.0, a missing RescaleIntercept to 0.0 and a
    missing PixelRepresentation to signed.
    """
    data = bytes(data)
    if len(data) < PREAMBLE_LEN + 4 or data[PREAMBLE_LEN : PREAMBLE_LEN + 4] != MAGIC:
        raise MissingMagic("no DICM magic after the 128-byte preamble")

    values = {}
    for tag, _vr, value in _read_elements(data, PREAMBLE_LEN + 4):
        values[tag] = value

    def _us(tag):
        raw = values.get(tag)
        if raw is None:
            return None
        if len(raw) < 2:
            raise TruncatedElement(f"US element {tag} shorter than 2 bytes")
        return struct.unpack_from("<H", raw)[0]

    rows, cols = _us(TAG_ROWS), _us(TAG_COLUMNS)
    if rows is None or cols is None:
        raise TruncatedElement("Rows/Columns elements missing")
    bits = _us(TAG_BITS_ALLOCATED)
    if bits is not None and bits != 16:
        raise UnsupportedBitsAllocated(f"BitsAllocated={bits}, only 16 is supported")
    representation = _us(TAG_PIXEL_REPRESENTATION)
    signed = representation is None or representation == 1

    pixel_bytes = values.get(TAG_PIXEL_DATA)
    if pixel_bytes is None:
        raise TruncatedElement("PixelData element missing")
    if len(pixel_bytes) != 2 * rows * cols:
        raise PixelLengthMismatch(
            f"PixelData has {len(pixel_bytes)} bytes, expected {2 * rows * cols}"
        )
    raw = np.frombuffer(pixel_bytes, dtype="<i2" if signed else "<u2")
    if not signed and raw.size and raw.max() > np.iinfo(np.int16).max:
        log.warning("unsigned pixel values above 32767 are clipped to int16")
    pixels = np.clip(raw.astype(np.int32), -32768, 32767).astype(np.int16).reshape(rows, cols)

    slope = _parse_ds(values.get(TAG_RESCALE_SLOPE, b""))
    intercept = _parse_ds(values.get(TAG_RESCALE_INTERCEPT, b""))
    position = _parse_ds(values.get(TAG_IMAGE_POSITION, b""))
    uid = values.get(TAG_SOP_INSTANCE_UID, b"").decode("ascii").rstrip("\x00 ")

    return CtSlice(
        rows=rows,
        cols=cols,
        pixels=pixels,
        rescale_slope=slope[0] if slope else 1.0,
        rescale_intercept=intercept[0] if intercept else 0.0,
        z_position=position[2] if len(position) >= 3 else 0.0,
        source_id=uid,
    )


def _short_element(tag, vr: bytes, value: bytes) -> bytes:
    return struct.pack("<HH", *tag) + vr + struct.pack("<H", len(value)) + value


def _ds(*numbers: float) -> bytes:
    # repr() round-trips float64 exactly; pad to even length with a space
    text = "\\".join(repr(float(x)) for x in numbers).encode("ascii")
    return text + b" " if len(text) % 2 else text


def write_dicom_slice(ct: CtSlice) -> bytes:
    """Serialize ``ct`` to exactly the element subset the parser reads."""
    uid = ct.source_id.encode("ascii")
    if len(uid) % 2:
        uid += b"\x00"
    pixel_data = ct.pixels.astype("<i2").tobytes()
    parts = [
        b"\x00" * PREAMBLE_LEN,
        MAGIC,
        _short_element(TAG_SOP_INSTANCE_UID, b"UI", uid),
        _short_element(TAG_IMAGE_POSITION, b"DS", _ds(0.0, 0.0, ct.z_position)),
        _short_element(TAG_ROWS, b"US", struct.pack("<H", ct.rows)),
        _short_element(TAG_COLUMNS, b"US", struct.pack("<H", ct.cols)),
        _short_element(TAG_BITS_ALLOCATED, b"US", struct.pack("<H", 16)),
        _short_element(TAG_PIXEL_REPRESENTATION, b"US", struct.pack("<H", 1)),
        _short_element(TAG_RESCALE_INTERCEPT, b"DS", _ds(ct.rescale_intercept)),
        _short_element(TAG_RESCALE_SLOPE, b"DS", _ds(ct.rescale_slope)),
        struct.pack("<HH", *TAG_PIXEL_DATA) + b"OW\x00\x00" + struct.pack("<I", len(pixel_data)),
        pixel_data,
    ]
    return b"".join(parts)


def assemble_volume(patient_id: str, slices: Iterable[CtSlice]) -> CtVolume:
    """Order slices by ascending z and check they form one volume."""
    slices = list(slices)
    if not slices:
        raise DimensionMismatch(f"patient {patient_id}: no slices")
    rows, cols = slices[0].rows, slices[0].cols
    for s in slices:
        if (s.rows, s.cols) != (rows, cols):
            raise DimensionMismatch(
                f"patient {patient_id}: slice {s.source_id!r} is {s.rows}x{s.cols}, expected {rows}x{cols}"
            )
    ordered = sorted(slices, key=lambda s: s.z_position)
    for a, b in zip(ordered, ordered[1:]):
        if a.z_position == b.z_position:
            raise DuplicateZ(f"patient {patient_id}: two slices at z={a.z_position}")
    return CtVolume(patient_id, tuple(ordered))


# ------------------------------------------------------------------- CSV


def _number(value: str, column: str, line: int, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise NonNumericField(f"line {line}: {column}={value!r} is not numeric") from None


def parse_metadata_csv(text: str) -> list[PatientRecord]:
    """Group OSIC-style visit rows into one record per patient.

    Demographics come from the first row seen for each patient; later
    rows that disagree are ignored with a warning.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CSV_HEADER:
        raise BadHeader(f"expected header {','.join(CSV_HEADER)}, got {header!r}")

    sexes = {s.value: s for s in Sex}
    smokers = {s.value: s for s in Smoking}
    demographics: dict[str, tuple] = {}
    visits: dict[str, list[Visit]] = {}

    for line, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise BadHeader(f"line {line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        pid, weeks, fvc, percent, age, sex, smoking = (cell.strip() for cell in row)
        if sex not in sexes:
            raise BadEnum(f"line {line}: Sex={sex!r}")
        if smoking not in smokers:
            raise BadEnum(f"line {line}: SmokingStatus={smoking!r}")
        visit = Visit(
            week=_number(weeks, "Weeks", line, int),
            fvc_ml=_number(fvc, "FVC", line),
            percent=_number(percent, "Percent", line),
        )
        demo = (_number(age, "Age", line), sexes[sex], smokers[smoking])
        if pid not in demographics:
            demographics[pid] = demo
            visits[pid] = []
        elif demographics[pid] != demo:
            log.warning("patient %s: line %d demographics differ from first row; ignored", pid, line)
        visits[pid].append(visit)

    records = []
    for pid in sorted(visits):
        age, sex, smoking = demographics[pid]
        ordered = tuple(sorted(visits[pid], key=lambda v: v.week))
        records.append(PatientRecord(pid, ordered, age, sex, smoking))
    return records


def format_metadata_csv(records: Iterable[PatientRecord]) -> str:
    """Inverse of :func:`parse_metadata_csv` (``\\n`` line endings)."""
    lines = [",".join(CSV_HEADER)]
    for rec in records:
        for v in rec.visits:
            lines.append(
                ",".join(
                    [rec.patient_id, str(v.week), repr(float(v.fvc_ml)), repr(float(v.percent)),
                     repr(float(rec.age)), rec.sex.value, rec.smoking.value]
                )
            )
    return "\n".join(lines) + "\n"


def read_volume_dir(patient_id: str, directory) -> CtVolume:
    files = sorted(Path(directory).glob("*.dcm"))
    return assemble_volume(patient_id, [parse_dicom_slice(f.read_bytes()) for f in files])


def read_cohort(directory, metadata_name: str = "metadata.csv") -> list:
    """Load ``metadata.csv`` and one ``<patient_id>/`` folder of slices per patient.

    Returns ``(PatientRecord, CtVolume)`` pairs in patient-id order.
    """
    root = Path(directory)
    records = parse_metadata_csv((root / metadata_name).read_text(encoding="utf-8"))
    return [(rec, read_volume_dir(rec.patient_id, root / rec.patient_id)) for rec in records]
