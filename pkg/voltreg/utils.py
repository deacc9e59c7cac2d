"""Utility functions for voltreg."""

import json

from ruamel.yaml import YAML

yaml = YAML()
yaml.default_flow_style = False


def recursive_sort_mappings(s):
    """Recursively re-insert every mapping's keys in ascending order."""
    if isinstance(s, list):
        for elem in s:
            recursive_sort_mappings(elem)
        return
    if not isinstance(s, dict):
        return
    for key in sorted(s):
        value = s.pop(key)
        recursive_sort_mappings(value)
        s[key] = value


def dump_yaml(data, path):
    """Write a mapping to a YAML file with every mapping sorted by key."""
    recursive_sort_mappings(data)
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(data, f)


def load_yaml(path):
    """Read a YAML file, returning an empty mapping for an empty document."""
    with open(path, encoding="utf-8") as f:
        data = yaml.load(f)
    return data or {}


def dump_json(data, path):
    """Write JSON deterministically: sorted keys, fixed indent, trailing newline."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(data, sort_keys=True, indent=2))
        f.write("\n")


def complex_pair(value):
    """Encode a complex number as [re, im] for JSON payloads."""
    value = complex(value)
    return [value.real, value.imag]
