//! The extension module driven from an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(script: &std::ffi::CStr) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(agora_py::agora_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("agora", module).unwrap();
        if let Err(e) = py.run(script, None, Some(&locals)) {
            e.print(py);
            panic!("python script failed: {e}");
        }
    });
}

#[test]
fn free_functions() {
    with_module(c"
decided = agora.decide_patterns(['limited_budget'])
assert decided['config']['querying'] == 'one_shot', decided

vec = agora.embed('tea leaves')
assert len(vec) == 64
assert abs(sum(x * x for x in vec) - 1.0) < 1e-9
assert all(x == 0.0 for x in agora.embed('   '))

res = agora.tally('weighted', ['x', 'y'], [('a', 'x', 2.0), ('b', 'y', 1.0), ('c', 'y', 0.5)])
assert res['winner'] == 'x', res
try:
    agora.tally('plurality', ['x'], [])
    raise AssertionError('unknown method accepted')
except ValueError:
    pass
");
}

#[test]
fn knowledge_base_and_guards() {
    with_module(c"
kb = agora.KnowledgeBase()
kb.index('tea', 'green tea grows on hills', ['drink'])
kb.index('sum', 'two plus three is five')
assert len(kb) == 2
hits = kb.retrieve('green tea', 2)
assert hits[0][0] == 'tea' and hits[0][1] >= hits[1][1]
assert [h[0] for h in kb.retrieve('five', 5, ['drink'])] == ['tea']
try:
    kb.index('tea', 'again')
    raise AssertionError('duplicate id accepted')
except ValueError:
    pass

guards = agora.GuardPipeline()
assert len(guards) > 0
assert guards.check_input('compute: 2+3')['verdict'] == 'pass'
custom = agora.GuardPipeline('[{\"rule_id\": \"kw\", \"scope\": \"both\", \"kind\": \"keyword_block\", \"params\": {\"keywords\": [\"secret\"]}}]')
assert custom.check_output('the secret plan')['verdict'] == 'block'
");
}

#[test]
fn runs_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let script = format!(
        "
import json
rt = agora.Runtime()
assert 'passive_goal_creator' in rt.active_patterns
run = rt.run('compute: 2+3', seed=1)
assert run.run_id == 'run-1'
assert run.status == 'complete', run.status
assert run.final_answer == '5'
assert run.model_calls() > 0
events = run.events()
assert events[-1]['event_type'] == 'run_completed'
assert agora.verify_records(events)['status'] == 'intact'
with open({path:?}, 'w') as f:
    for e in events:
        f.write(json.dumps(e) + '\\n')
assert agora.verify_log({path:?}, events[-1]['digest'])['status'] == 'intact'
events[0]['actor_id'] = events[0]['actor_id'] + 'x'
assert agora.verify_records(events)['status'] == 'broken'

human = agora.Runtime(json.dumps({{'reflectors': ['human']}}))
waiting = human.run('compute: 2+3')
assert waiting.status == 'awaiting_human'
assert waiting.pending['kind'] == 'feedback', waiting.pending
try:
    waiting.post_choice('n0', 'n0.1')
    raise AssertionError('choice accepted while awaiting feedback')
except RuntimeError:
    pass
waiting.post_feedback({{'verdict': 'approve'}})
assert waiting.status == 'complete' and waiting.final_answer == '5'
assert waiting.result()['final_answer'] == '5'
"
    );
    let script = std::ffi::CString::new(script).unwrap();
    with_module(&script);
}
