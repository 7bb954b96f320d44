"""Flat ``key = value`` text files used by the valley, simulate, and campaign configs."""

from __future__ import annotations

from .errors import ValidationError


def load_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValidationError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def save_kv(entries: dict, path) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


class _Required:
    def __repr__(self):  # pragma: no cover
        return "<required>"


_REQUIRED = _Required()


class KvReader:
    """Typed access over a parsed key-value mapping with error context."""

    def __init__(self, entries: dict[str, str], source: str = "<config>"):
        self.entries = dict(entries)
        self.source = source
        self._seen: set[str] = set()

    @classmethod
    def from_file(cls, path) -> "KvReader":
        return cls(load_kv(path), source=str(path))

    def _fetch(self, key, default):
        self._seen.add(key)
        if key in self.entries:
            return self.entries[key]
        if default is _REQUIRED:
            raise ValidationError(f"{self.source}: missing required key {key!r}")
        return default

    def str(self, key, default=None):
        value = self._fetch(key, _REQUIRED if default is None else default)
        return value

    def float(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ValidationError(f"{self.source}: key {key!r} is not a number: {value!r}") from None
        return value

    def int(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                raise ValidationError(f"{self.source}: key {key!r} is not an integer: {value!r}") from None
        return value

    def int_list(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if isinstance(value, str):
            try:
                return [int(tok) for tok in value.replace(",", " ").split()]
            except ValueError:
                raise ValidationError(f"{self.source}: key {key!r} is not an integer list: {value!r}") from None
        return list(value)

    def pairs(self, key, default=_REQUIRED):
        """Parse 't:value' pairs, e.g. '0:150 60:370 180:150'."""
        value = self._fetch(key, default)
        if not isinstance(value, str):
            return value
        out = []
        for tok in value.split():
            try:
                t, q = tok.split(":")
                out.append((float(t), float(q)))
            except ValueError:
                raise ValidationError(f"{self.source}: key {key!r}: bad pair {tok!r}") from None
        return out

    def unknown_keys(self):
        return sorted(set(self.entries) - self._seen)
