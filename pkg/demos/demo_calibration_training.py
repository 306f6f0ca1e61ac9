"""
Calibration under sparse distillation
=====================================

Train a teacher on the synthetic Gaussian-class task, then distill students
with dense targets, raw Top-K targets, and random-sampling targets. Top-K
students come out over-confident (high ECE); the other two stay calibrated.

Shrunk well below the full experiment so it finishes in about a minute; see
tests/test_acceptance.py for the full desk-scale version with frozen margins.
"""

from sparsekd import SchemeSpec, TrainConfig, make_rng, make_task, train

config = TrainConfig(num_rounds=600, batch_size=256, eval_batches=40, eval_batch_size=512)
rng = make_rng(0)
task_rng, teacher_rng, *student_rngs = rng.spawn(6)
task = make_task(64, 16, 1.5, task_rng)

teacher = train(SchemeSpec("teacher-ce"), task, config, rng=teacher_rng)
print(f"{'teacher-ce':>22}: accuracy {teacher.accuracy:6.2%}  ECE {teacher.report.ece:7.4f}")

schemes = [
    SchemeSpec("student-ce"),
    SchemeSpec("fullkd"),
    SchemeSpec("topk", k=5),
    SchemeSpec("random-sampling", sample_rounds=40),
]
for spec, student_rng in zip(schemes, student_rngs):
    teacher_model = None if spec.name == "student-ce" else teacher.model
    result = train(spec, task, config, rng=student_rng, teacher=teacher_model)
    print(f"{spec.label:>22}: accuracy {result.accuracy:6.2%}  ECE {result.report.ece:7.4f}")

print("\nexpected picture: topk ECE well above the others at similar accuracy")
