use std::path::Path;
use std::sync::Arc;

use empathyear_core::backends::mock::{MockFace, MockLlm, MockSpeech, RelabelingFace, RelabelingSpeech};
use empathyear_core::backends::{BackendSet, LIP_SYNC_TOLERANCE_S};
use empathyear_core::conversation::{MediaStore, SessionStore};
use empathyear_core::pipeline::{consistency_check, Pipeline, PipelineConfig, StepOutcome, TurnInput, STEP_COUNT};
use empathyear_core::retrieval::ReferenceIndex;
use empathyear_core::taxonomy::{EmotionLabel, Taxonomy};
use proptest::prelude::*;

fn pipeline(dir: &Path, backends: BackendSet) -> Pipeline {
    let demo = Path::new(empathyear_core::DEMO_ASSETS);
    let tax = Taxonomy::canonical();
    Pipeline {
        taxonomy: Arc::new(tax.clone()),
        index: Arc::new(ReferenceIndex::load(&demo.join("references.json"), demo, tax).unwrap()),
        backends,
        sessions: SessionStore::open(dir).unwrap(),
        media: MediaStore::open(dir.join("media")).unwrap(),
        config: PipelineConfig::default(),
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    /// Whatever the LLM decides, the generators receive its label and text.
    #[test]
    fn random_turns_stay_consistent(text in "[A-Za-z][A-Za-z ,.!?']{0,60}") {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), BackendSet::mock());
        let r = runtime().block_on(async {
            let s = p.sessions.create_session().unwrap();
            p.run_turn(&s.id, TurnInput::text(text.clone())).await.unwrap()
        });
        prop_assert!(!r.degraded);
        let report = consistency_check(&r.trace, &r.meta);
        prop_assert!(report.pass, "{}", report);
        let (audio, video) = (r.audio.unwrap(), r.video.unwrap());
        prop_assert_eq!(&audio.emotion, &r.meta.emotion.label);
        prop_assert_eq!(&video.emotion, &r.meta.emotion.label);
        prop_assert!((audio.duration_s - video.duration_s).abs() <= LIP_SYNC_TOLERANCE_S);

        prop_assert_eq!(r.trace.steps.len(), usize::from(STEP_COUNT));
        for (i, step) in r.trace.steps.iter().enumerate() {
            prop_assert_eq!(usize::from(step.step), i + 1);
            prop_assert!(step.started <= step.ended);
            if let Some(next) = r.trace.steps.get(i + 1) {
                prop_assert!(step.ended <= next.started);
            }
        }
    }
}

#[test]
fn relabeled_speech_is_caught_at_step_five() {
    let dir = tempfile::tempdir().unwrap();
    let backends = BackendSet {
        speech: Arc::new(RelabelingSpeech {
            inner: MockSpeech::new(),
            label: EmotionLabel::new_unchecked("Joyful"),
        }),
        ..BackendSet::mock()
    };
    let p = pipeline(dir.path(), backends);
    let r = runtime().block_on(async {
        let s = p.sessions.create_session().unwrap();
        p.run_turn(&s.id, TurnInput::text(empathyear_core::backends::mock::TRAFFIC_QUERY))
            .await
            .unwrap()
    });
    assert_eq!(r.trace.outcome(5), Some(StepOutcome::Ok));
    let report = consistency_check(&r.trace, &r.meta);
    assert!(!report.pass);
    assert!(report.diffs.iter().all(|d| d.step == 5));
    assert_eq!(report.diffs[0].expected, "Angry");
    assert_eq!(report.diffs[0].actual, "Joyful");
}

#[test]
fn untouched_backends_pass_and_relabeled_face_fails() {
    let dir = tempfile::tempdir().unwrap();
    let honest = BackendSet {
        llm: Arc::new(MockLlm::new()),
        face: Arc::new(MockFace::new()),
        ..BackendSet::mock()
    };
    let tampered = BackendSet {
        face: Arc::new(RelabelingFace {
            inner: MockFace::new(),
            label: EmotionLabel::new_unchecked("Sad"),
        }),
        ..BackendSet::mock()
    };
    for (backends, should_pass) in [(honest, true), (tampered, false)] {
        let p = pipeline(dir.path(), backends);
        let r = runtime().block_on(async {
            let s = p.sessions.create_session().unwrap();
            p.run_turn(&s.id, TurnInput::text("My sister got married today!"))
                .await
                .unwrap()
        });
        assert_eq!(consistency_check(&r.trace, &r.meta).pass, should_pass);
    }
}
