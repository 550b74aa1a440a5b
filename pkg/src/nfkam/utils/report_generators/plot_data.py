"""Whitespace-separated data blocks for gnuplot, one index block per series."""

from nfkam.data import RunArtifact
from nfkam.utils.report_generators.environment import make_environment

TEMPLATES = {
    "norm_decay.dat": """\
# nu post_norm tail_norm
{% for s in steps %}
{{ s.nu }} {{ s.post_norm|exact }} {{ s.tail_norm|exact }}
{% endfor %}
""",
    "measure.dat": """\
# gamma fraction stderr
{% for g, f, s in rows %}
{{ g|exact }} {{ f|exact }} {{ s|exact }}
{% endfor %}
""",
    "degeneracy.dat": """\
# delta min_abs_det
{% for d, det in samples %}
{{ d|exact }} {{ det|exact }}
{% endfor %}
""",
}

ENV = make_environment(TEMPLATES)


def render_plot_data(artifact: RunArtifact) -> dict[str, str]:
    det = artifact.deterministic
    measure = det.measure
    rows = list(zip(measure.gammas, measure.fractions, measure.stderrs)) if measure else []
    samples = det.degeneracy.samples if det.degeneracy else []
    return {
        "norm_decay.dat": ENV.get_template("norm_decay.dat").render(steps=det.steps),
        "measure.dat": ENV.get_template("measure.dat").render(rows=rows),
        "degeneracy.dat": ENV.get_template("degeneracy.dat").render(samples=samples),
    }
