import json

import pytest

from adaptany import llm as llm_mod
from adaptany.prompt_engine import (PromptRecord, PromptSet, build_prompt_set,
                                    dedup, domain_prompt, gpt_prompts,
                                    load_prompt_set, simple_prompt,
                                    write_prompt_set)
from adaptany.tasks import TaskSpec


def test_simple_prompt_template():
    assert simple_prompt("Chair").text == "a photo of a Chair"
    assert simple_prompt("Computer Mouse").text == "a photo of a Computer Mouse"
    # literal substitution, no article correction
    assert simple_prompt("x").text == "a photo of a x"


def test_simple_prompt_metadata():
    rec = simple_prompt("Chair", category_id=3)
    assert rec.mechanism == "simple"
    assert rec.category_id == 3
    assert rec.category_name == "Chair"


def test_simple_prompt_empty_rejected():
    with pytest.raises(ValueError):
        simple_prompt("")


def test_domain_prompt_template():
    assert (domain_prompt("Art Painting", "Chair").text
            == "a Art Painting photo of a Chair")
    assert (domain_prompt("Real World", "Computer Mouse").text
            == "a Real World photo of a Computer Mouse")
    assert domain_prompt("d", "c").text == "a d photo of a c"


def test_domain_prompt_requires_both_args():
    with pytest.raises(ValueError):
        domain_prompt("", "Chair")
    with pytest.raises(ValueError):
        domain_prompt("Art", "")


def test_templates_are_pure():
    a = simple_prompt("Chair")
    b = simple_prompt("Chair")
    assert a.text == b.text


def _record(text, cid=0):
    return PromptRecord(text=text, category_name="c", category_id=cid,
                        mechanism="gpt")


def test_dedup_casefold_and_whitespace():
    ps = PromptSet(records=[_record("a photo of a Chair"),
                            _record("A  photo of a chair")],
                   task_id="t", created_with="gpt")
    assert len(dedup(ps).records) == 1


def test_dedup_distinct_labels_kept():
    ps = PromptSet(records=[_record("a photo of a Chair", 0),
                            _record("a photo of a Chair", 1)],
                   task_id="t", created_with="gpt")
    assert len(dedup(ps).records) == 2


def test_dedup_identity_and_idempotent():
    records = [_record("one"), _record("two"), _record("three")]
    ps = PromptSet(records=records, task_id="t", created_with="gpt")
    once = dedup(ps)
    assert once.records == records
    assert dedup(once).records == once.records


def test_prompt_record_rejects_newline():
    with pytest.raises(ValueError):
        _record("two\nlines")


FIG_PROMPTS = ["Abstract expressionist interpretation of a rocking chair",
               "Sketch of a vintage wingback chair"]


def _replay_log(tmp_path, lines, count=50):
    from adaptany.prompt_engine import gpt_instruction
    log = tmp_path / "replay.jsonl"
    instruction = gpt_instruction("Art Painting style images", "Chair object",
                                  count)
    llm_mod.record_exchange(log, instruction, "\n".join(lines))
    return log


def test_gpt_prompts_from_replay(tmp_path):
    log = _replay_log(tmp_path, FIG_PROMPTS)
    client = llm_mod.ReplayLlmClient(log)
    records = gpt_prompts("Art Painting style images", "Chair object",
                          "Chair", 50, client, category_id=2)
    texts = [r.text for r in records]
    assert FIG_PROMPTS[0] in texts
    assert FIG_PROMPTS[1] in texts
    assert all(r.category_id == 2 for r in records)
    assert all(r.mechanism == "gpt" for r in records)


def test_gpt_prompts_single_line_replay(tmp_path):
    log = _replay_log(tmp_path, ["only line"], count=1)
    client = llm_mod.ReplayLlmClient(log)
    records = gpt_prompts("Art Painting style images", "Chair object",
                          "Chair", 1, client)
    assert [r.text for r in records] == ["only line"]


def test_gpt_prompts_empty_generation(tmp_path):
    log = _replay_log(tmp_path, ["", "  "], count=5)
    client = llm_mod.ReplayLlmClient(log)
    with pytest.raises(llm_mod.EmptyGenerationError):
        gpt_prompts("Art Painting style images", "Chair object",
                    "Chair", 5, client)


def test_gpt_label_invariance(tmp_path):
    # prompt wording mentioning other categories never changes the label
    log = _replay_log(tmp_path, ["a table next to a lamp"], count=3)
    client = llm_mod.ReplayLlmClient(log)
    records = gpt_prompts("Art Painting style images", "Chair object",
                          "Chair", 3, client, category_id=7)
    assert all(r.category_id == 7 for r in records)


def test_parse_prompt_lines_strips_markers():
    raw = "1. first prompt\n- second prompt\n* \"third prompt\"\n\n  \n"
    assert llm_mod.parse_prompt_lines(raw) == [
        "first prompt", "second prompt", "third prompt"]


def test_build_prompt_set_simple_covers_all_categories():
    task = TaskSpec(task_id="t", category_names=("Chair", "Desk", "Lamp"))
    ps = build_prompt_set(task, "simple")
    assert ps.categories_present() == {0, 1, 2}
    assert ps.created_with == "simple"


def test_build_prompt_set_domain():
    task = TaskSpec(task_id="t", category_names=("Chair",),
                    domain_name="Clipart")
    ps = build_prompt_set(task, "domain")
    assert ps.records[0].text == "a Clipart photo of a Chair"
    assert ps.records[0].domain_name == "Clipart"


def test_prompt_set_roundtrip(tmp_path):
    task = TaskSpec(task_id="t", category_names=("Chair", "Desk"))
    ps = build_prompt_set(task, "simple")
    path = tmp_path / "prompts.jsonl"
    write_prompt_set(ps, path)
    loaded = load_prompt_set(path)
    assert loaded.records == ps.records
    assert loaded.task_id == ps.task_id


def test_replay_client_unknown_instruction(tmp_path):
    log = tmp_path / "log.jsonl"
    log.write_text(json.dumps({"instruction": "i", "response": "r"}) + "\n")
    client = llm_mod.ReplayLlmClient(log)
    with pytest.raises(llm_mod.LlmClientError):
        client.complete("something else")
