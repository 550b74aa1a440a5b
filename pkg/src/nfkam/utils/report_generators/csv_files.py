"""Comma-separated exports: measure estimates, step history and trajectories."""

from nfkam.core.dynamics import Trajectory
from nfkam.data import RunArtifact
from nfkam.utils.report_generators.environment import make_environment

MEASURE_COLUMNS = ("gamma", "fraction", "stderr")

TEMPLATES = {
    "measure.csv": """\
{{ columns|join(",") }}
{% for g, f, s in rows %}
{{ g|exact }},{{ f|exact }},{{ s|exact }}
{% endfor %}
""",
    "steps.csv": """\
nu,pre_norm,post_norm,tail_norm,minimal_divisor,homological_residual,drift_constant
{% for s in steps %}
{{ s.nu }},{{ s.pre_norm|exact }},{{ s.post_norm|exact }},{{ s.tail_norm|exact }},{{ s.minimal_divisor|exact }},{{ s.homological_residual|exact }},{{ s.drift_constant|exact }}
{% endfor %}
""",
    "trajectory.csv": """\
{{ header|join(",") }}
{% for row in rows %}
{{ row|map("exact")|join(",") }}
{% endfor %}
""",
}

ENV = make_environment(TEMPLATES)


def render_csv(artifact: RunArtifact) -> dict[str, str]:
    det = artifact.deterministic
    measure = det.measure
    rows = list(zip(measure.gammas, measure.fractions, measure.stderrs)) if measure else []
    return {
        "measure.csv": ENV.get_template("measure.csv").render(columns=MEASURE_COLUMNS, rows=rows),
        "steps.csv": ENV.get_template("steps.csv").render(steps=det.steps),
    }


def render_trajectory_csv(trajectory: Trajectory) -> str:
    """t, x..., y..., u..., v..., energy"""
    return ENV.get_template("trajectory.csv").render(header=trajectory.header(), rows=trajectory.rows())
