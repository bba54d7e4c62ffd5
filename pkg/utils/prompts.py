"""Prompt templates for the reasoning steps.

The wording lives in ``prompts/templates.txt`` so it can be reviewed and
versioned apart from the code; this module only finds and fills sections.
"""

import re
from functools import cache
from pathlib import Path

TEMPLATES_PATH = Path(__file__).resolve().parent.parent / "prompts" / "templates.txt"

_SECTION = re.compile(r"^\[([\w.]+)\]\s*$", re.MULTILINE)
_PLACEHOLDERS = ("options", "node_a", "node_b")


@cache
def load_templates(path: Path = TEMPLATES_PATH) -> dict[str, str]:
    """Return every template section keyed by its header name."""
    text = path.read_text(encoding="utf-8")
    heads = list(_SECTION.finditer(text))
    sections = {}
    for i, m in enumerate(heads):
        end = heads[i + 1].start() if i + 1 < len(heads) else len(text)
        sections[m.group(1)] = text[m.end():end].strip()
    return sections


def get_template(name: str) -> str:
    templates = load_templates()
    if name not in templates:
        raise KeyError(f"no prompt template named {name!r}")
    return templates[name]


def render(name: str, **values) -> str:
    """Fill a template's placeholders; text inside values is never re-scanned."""
    out = get_template(name)
    for key in _PLACEHOLDERS:
        if key in values:
            out = out.replace("{" + key + "}", str(values[key]))
    return out


# Verbatim instruction strings that every prompt family must carry.
INDUCTIVE_INSTRUCTION = get_template("inductive")
NODE_QUESTION_TAIL = "think step by step then choose one of the options"
LINK_QUESTION_TAIL = "choose either TRUE or FALSE"
