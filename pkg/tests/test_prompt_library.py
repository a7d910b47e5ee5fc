import pytest

from mcpforge.gateway import render_prompt
from mcpforge.prompt_library import (
    EXTENSION_TEMPLATES,
    VENDORED_TEMPLATES,
    TemplateCatalog,
    TemplateNotFound,
    default_catalog,
    get_template,
)

# Pinned digests: any edit to a shipped template body fails loudly here.
GOLDEN_CHECKSUMS = {
    "diversify_constraint": "8050dce71cfd1c587d857f0902b2d8cce8f1f7c1a17b848705b2a6527f9d3548",
    "diversify_persona": "5aaa90cba7f465c7bb8d12eeef6494a7dd2a6ed9cfeaa10dba5a8c7038778940",
    "follow_up": "d03c5f1b766025cb4585c6242de82435d3c45b14566634083e7fa2e38172e677",
    "multiturn_split": "100ac4c59e40ea0e0e321bd3d00e890d46f9df10534ea2b78a672417d41bc5ab",
    "server_category": "05c79aa7c3d7f9aee1110e1dda642a0b40e563b9cd8a478014594ac49001554c",
    "task_featured": "1dffb43d572e8a022a79201c9ae508671465b11723f014de0a9fbbfc158f9864",
    "task_multi_server": "426d3e62c772d384d8e4fba0325570713cc185cb5ec46744655fef7221677ed1",
    "task_quality": "6da7f59b6e38b9cd80443b4c5cb754ff7e30b826ac6ccd334d5346bb3b5fb6da",
    "task_single_multi_tool": "b57020aec94ae674279330c1299a7285d7dca1cd59e6245f339657749175ed33",
    "task_single_one_tool": "5efeea47793eb6d3e401d1546507f6641ee10dcaae874534d43b732011143087",
    "traj_quality": "90f0ed3fffd18aabf59fdaae01a14c5bc9e052e4e2d936b166dc657652192f33",
}


def test_checksums_pinned():
    assert default_catalog().checksums() == GOLDEN_CHECKSUMS


def test_every_declared_slot_is_present():
    for tid, slots in {**VENDORED_TEMPLATES, **EXTENSION_TEMPLATES}.items():
        template = get_template(tid)
        for slot in slots:
            assert slot in template.required_slots, f"{tid} lost slot {slot}"


def test_templates_render_with_declared_slots_only():
    for tid, slots in {**VENDORED_TEMPLATES, **EXTENSION_TEMPLATES}.items():
        template = get_template(tid)
        bindings = {slot: f"value for {slot.lower()}" for slot in template.required_slots}
        rendered = render_prompt(template, bindings)
        assert "{" + template.required_slots[0] + "}" not in rendered


def test_unknown_template_raises():
    with pytest.raises(TemplateNotFound):
        get_template("does_not_exist")


def test_register_new_id_but_not_shipped_ids():
    catalog = TemplateCatalog()
    tpl = catalog.register("house_style", "Respond in the {TONE} tone.")
    assert tpl.required_slots == ("TONE",)
    with pytest.raises(ValueError):
        catalog.register("task_quality", "override attempt")
