#!/usr/bin/env python3
"""Export the music21 Bach chorale corpus to four-track Standard MIDI Files.

Each output file holds a conductor track followed by one track per voice
(soprano, alto, tenor, bass) on MIDI channels 0-3. Tied notes are merged.
Scores without a full set of SATB parts are skipped.

    pip install music21
    python3 scripts/export_chorales.py data/bach-chorales
"""

import struct
import sys
from pathlib import Path

import music21
from music21 import corpus

TPQ = 480
ROLES = ("soprano", "alto", "tenor", "bass")


def vlq(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def chunk(kind, payload):
    return kind + struct.pack(">I", len(payload)) + payload


def meta(kind, data):
    return b"\xff" + bytes([kind]) + vlq(len(data)) + data


def track_bytes(name, channel, notes):
    # notes: list of (start_tick, end_tick, pitch)
    events = []
    for start, end, pitch in notes:
        events.append((start, 1, bytes([0x90 | channel, pitch, 80])))
        events.append((end, 0, bytes([0x80 | channel, pitch, 0])))
    # note-offs sort before note-ons at the same tick
    events.sort(key=lambda e: (e[0], e[1]))
    body = bytearray()
    body += vlq(0) + meta(0x03, name.encode("utf-8"))
    body += vlq(0) + bytes([0xC0 | channel, 52])
    last = 0
    for tick, _, msg in events:
        body += vlq(tick - last) + msg
        last = tick
    body += vlq(0) + meta(0x2F, b"")
    return chunk(b"MTrk", bytes(body))


def role_of(part_name):
    name = (part_name or "").lower()
    for role in ROLES:
        if name.startswith(role):
            return role
    return None


def voice_notes(part):
    notes = []
    for n in part.stripTies().flatten().notes:
        start = round(float(n.offset) * TPQ)
        length = max(1, round(float(n.quarterLength) * TPQ))
        for p in n.pitches:
            notes.append((start, start + length, int(p.midi)))
    notes.sort()
    return notes


def export(path, out_dir):
    score = music21.converter.parse(path)
    voices = {}
    for part in score.parts:
        role = role_of(part.partName)
        if role and role not in voices:
            voices[role] = part
    if len(voices) != len(ROLES):
        return False
    conductor = bytearray()
    conductor += vlq(0) + meta(0x51, (500000).to_bytes(3, "big"))
    conductor += vlq(0) + meta(0x2F, b"")
    tracks = [chunk(b"MTrk", bytes(conductor))]
    for channel, role in enumerate(ROLES):
        tracks.append(track_bytes(role.capitalize(), channel, voice_notes(voices[role])))
    header = chunk(b"MThd", struct.pack(">HHH", 1, len(tracks), TPQ))
    stem = path.name[: -len(path.suffix)]
    (out_dir / f"{stem}.mid").write_bytes(header + b"".join(tracks))
    return True


def main():
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "data/bach-chorales")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for path in sorted(corpus.getComposer("bach")):
        if path.suffix not in (".mxl", ".xml"):
            continue
        if export(path, out_dir):
            written += 1
        else:
            skipped += 1
            print(f"skipped {path.name}: no SATB parts", file=sys.stderr)
    print(f"wrote {written} files to {out_dir} ({skipped} skipped)")


if __name__ == "__main__":
    main()
