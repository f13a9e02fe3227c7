"""The textual action grammar spoken between the GUI backbone and this
runtime.

Grammar (one action per reply; anything else parses as ``other``):
    click(x, y)            long_press(x, y)        scroll(up|down|left|right)
    type_text("...")       key(name)               open_app(name)
    navigate_back          navigate_home           wait
    complete

Coordinates are normalized floats in [0, 1]. Unparseable replies degrade to
``Action(kind=other, raw=<reply>)`` so evaluation can score them as misses
instead of crashing the episode.
"""

from __future__ import annotations

import re

from ..core import Action, ActionKind, ScrollDirection

_POINT_RE = re.compile(
    r"^\s*(click|long_press)\s*\(\s*(?:x\s*=\s*)?(-?\d+(?:\.\d+)?)\s*,\s*(?:y\s*=\s*)?(-?\d+(?:\.\d+)?)\s*\)\s*$",
    re.IGNORECASE,
)
_SCROLL_RE = re.compile(
    r"^\s*scroll\s*\(\s*(?:direction\s*=\s*)?[\"']?(up|down|left|right)[\"']?\s*\)\s*$",
    re.IGNORECASE,
)
_TEXT_RE = re.compile(
    r"^\s*(type_text|type|key|open_app)\s*\(\s*(?:[\"'](.*)[\"']|([^)]*?))\s*\)\s*$",
    re.IGNORECASE | re.DOTALL,
)
_BARE_RE = re.compile(r"^\s*(navigate_back|navigate_home|wait|complete)\s*(?:\(\s*\))?\s*$", re.IGNORECASE)

_TEXT_KINDS = {
    "type_text": ActionKind.TYPE_TEXT,
    "type": ActionKind.TYPE_TEXT,
    "key": ActionKind.KEY,
    "open_app": ActionKind.OPEN_APP,
}


def parse_action(text: str) -> Action:
    """Parse one action reply; never raises, falls back to kind=other."""
    raw = text if isinstance(text, str) else str(text)
    line = raw.strip()

    m = _BARE_RE.match(line)
    if m:
        return Action(kind=ActionKind(m.group(1).lower()), raw=raw)

    m = _POINT_RE.match(line)
    if m:
        x, y = float(m.group(2)), float(m.group(3))
        if 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0:
            return Action(kind=ActionKind(m.group(1).lower()), point=(x, y), raw=raw)
        return Action(kind=ActionKind.OTHER, raw=raw)

    m = _SCROLL_RE.match(line)
    if m:
        return Action(
            kind=ActionKind.SCROLL, direction=ScrollDirection(m.group(1).lower()), raw=raw
        )

    m = _TEXT_RE.match(line)
    if m:
        content = m.group(2) if m.group(2) is not None else m.group(3)
        kind = _TEXT_KINDS[m.group(1).lower()]
        if content:
            return Action(kind=kind, text=content, raw=raw)
        return Action(kind=ActionKind.OTHER, raw=raw)

    return Action(kind=ActionKind.OTHER, raw=raw)


def format_action(action: Action) -> str:
    """Serialize an action back into the grammar (round-trips parse_action)."""
    kind = action.kind
    if kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        x, y = action.point  # type: ignore[misc]
        return f"{kind.value}({x:g}, {y:g})"
    if kind is ActionKind.SCROLL:
        return f"scroll({action.direction.value})"  # type: ignore[union-attr]
    if kind in (ActionKind.TYPE_TEXT, ActionKind.KEY, ActionKind.OPEN_APP):
        return f'{kind.value}("{action.text}")'
    if kind is ActionKind.OTHER:
        return action.raw
    return kind.value
