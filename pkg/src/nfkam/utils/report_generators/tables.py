"""Fixed-width text tables of a run artifact."""

import math

from nfkam.data import RunArtifact
from nfkam.utils.report_generators.environment import make_environment

TEMPLATES = {
    "norm_decay.txt": """\
Norm decay
{{ "%4s  %14s  %14s  %14s  %14s  %14s"|format("nu", "|P| before", "|P| after", "|tail|", "min divisor", "homological") }}
{% for s in steps %}
{{ "%4d  %14s  %14s  %14s  %14s  %14s"|format(s.nu, s.pre_norm|num, s.post_norm|num, s.tail_norm|num, s.minimal_divisor|num, s.homological_residual|num) }}
{% endfor %}
""",
    "drift.txt": """\
Frequency drift
{{ "%4s  %14s  %14s  %14s  %14s  %s"|format("nu", "|drift|", "drift const", "shift resid", "lie remainder", "flags") }}
{% for s, size in rows %}
{{ "%4d  %14s  %14s  %14s  %14s  %s"|format(s.nu, size|num, s.drift_constant|num, s.shift_residual|num, s.lie_remainder|num, s.flags|join(",")) }}
{% endfor %}
""",
    "critical_points.txt": """\
Critical points of the averaged potential
{{ "%-28s  %-11s  %5s  %14s  %s"|format("u", "kind", "index", "|grad|", "eigenvalues") }}
{% for p in points %}
{{ "%-28s  %-11s  %5d  %14s  %s"|format(p.u|vec, p.kind or "-", p.morse_index, p.gradient_residual|num, p.eigenvalues|map("first")|list|vec) }}
{% endfor %}
{% if degeneracy %}
Euler sum {{ degeneracy.euler_sum }} ({{ "ok" if degeneracy.euler_ok else "FAIL" }}), order {{ degeneracy.order if degeneracy.order is not none else "-" }}{{ ", " ~ degeneracy.error if degeneracy.error else "" }}
{% endif %}
""",
    "conditions.txt": """\
Nondegeneracy conditions
{% for c in conditions %}
{{ "%-5s %-5s"|format(c.name, "holds" if c.holds else "FAILS") }}
{% endfor %}
""",
    "tori.txt": """\
Tori
{{ "%-28s  %14s  %14s  %14s"|format("u", "residual", "energy drift", "energy osc") }}
{% for t in tori %}
{{ "%-28s  %14s  %14s  %14s"|format(t.u_star|vec, t.residual|num, t.energy_drift|num, t.energy_oscillation|num) }}
{% endfor %}
""",
}

ENV = make_environment(TEMPLATES)


def render_tables(artifact: RunArtifact) -> dict[str, str]:
    """File name -> rendered table; an artifact without stages renders header-only tables"""
    det = artifact.deterministic
    drift_rows = [(s, math.sqrt(sum(v * v for v in s.drift))) for s in det.steps]
    points = det.degeneracy.critical_points if det.degeneracy else []
    context = {
        "steps": det.steps,
        "rows": drift_rows,
        "points": points,
        "degeneracy": det.degeneracy,
        "conditions": det.conditions,
        "tori": det.tori,
    }
    return {name: ENV.get_template(name).render(**context) for name in TEMPLATES}
