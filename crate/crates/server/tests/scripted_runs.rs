use seldinger_core::mechanism::DeviceConfig;
use seldinger_core::procedure::{FailureMode, Phase};
use seldinger_core::PhantomModel;
use seldinger_server::log::{Record, SessionLog};
use seldinger_server::protocol::ClientMessage;
use seldinger_server::replay::replay;
use seldinger_server::script::{run_script, Click, ClickMode, ClickTarget, RunOptions, Script, ScriptRun, Step};

fn human(script: &Script, seed: u64) -> ScriptRun {
    run_script(script, PhantomModel::human(), DeviceConfig::human(), seed, &RunOptions::default()).unwrap()
}

#[test]
fn canonical_human_succeeds_and_replays() {
    let run = human(&Script::canonical(), 1);
    assert_eq!(run.final_phase, Phase::Complete);
    let outcome = run.outcome.clone().unwrap();
    assert!(outcome.success, "{outcome:?}");
    assert_eq!(outcome.vessel.as_deref(), Some("artery"));
    assert!(run.rejections.is_empty(), "{:?}", run.rejections);

    let text = run.log.to_text();
    let parsed = SessionLog::parse(&text).unwrap();
    assert_eq!(parsed, run.log);
    assert!(replay(&parsed, None, None).unwrap().matches());
}

#[test]
fn flash_follows_lumen_entry_until_retraction() {
    let run = human(&Script::canonical(), 1);
    let names: Vec<&str> = run
        .log
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Event { event, .. } => Some(event.name()),
            _ => None,
        })
        .collect();
    let lumen = names.iter().position(|n| *n == "LumenEntry").unwrap();
    let wire = names.iter().position(|n| *n == "Guidewire").unwrap();
    assert!(lumen < wire);
    assert!(!names.contains(&"BackWallPuncture"));
}

#[test]
fn porcine_needs_the_tweak() {
    let s = Script::canonical();
    let bad = run_script(&s.without_tweak(), PhantomModel::porcine(), DeviceConfig::porcine(), 1, &RunOptions::default()).unwrap();
    let o = bad.outcome.unwrap();
    assert_eq!(o.failure_mode, Some(FailureMode::WallCatch));
    assert!(o.tip_offset_fraction.unwrap() > 0.5);
    let good = run_script(&s, PhantomModel::porcine(), DeviceConfig::porcine(), 1, &RunOptions::default()).unwrap();
    assert!(good.outcome.unwrap().success);
}

#[test]
fn click_outside_workspace_is_rejected_and_run_continues() {
    let mut s = Script::canonical();
    let i = s
        .steps
        .iter()
        .position(|x| matches!(x, Step::Click(Click { mode: ClickMode::Needle, .. })))
        .unwrap();
    s.steps.insert(i, Step::Click(Click { mode: ClickMode::Needle, target: ClickTarget::Pixel { u: 5.0, v: 470.0 } }));
    let run = human(&s, 1);
    assert_eq!(run.rejections.len(), 1);
    assert_eq!(run.rejections[0].0, i);
    assert!(run.log.records.iter().any(|r| matches!(r, Record::Command { accepted: false, message: ClientMessage::NeedleTarget { .. }, .. })));
    assert!(run.outcome.unwrap().success);
}

#[test]
fn tampered_command_reported_at_its_tick() {
    let run = human(&Script::canonical(), 2);
    let mut log = run.log.clone();
    let tick = log
        .records
        .iter_mut()
        .find_map(|r| match r {
            Record::Command { tick, message: ClientMessage::ClickCenter { u, .. }, .. } => {
                *u += 40.0;
                Some(*tick)
            }
            _ => None,
        })
        .unwrap();
    let report = replay(&log, None, None).unwrap();
    let d = report.divergence.unwrap();
    assert_eq!(d.tick, tick);
    assert_eq!(d.record, "command");
}
