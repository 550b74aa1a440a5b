import jinja2

from nfkam.utils.string_utils import format_exact, format_number, format_vector


def make_environment(templates: dict[str, str]) -> jinja2.Environment:
    env = jinja2.Environment(
        loader=jinja2.DictLoader(templates),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        undefined=jinja2.StrictUndefined,
        autoescape=False,
    )
    env.filters["num"] = format_number
    env.filters["exact"] = format_exact
    env.filters["vec"] = format_vector
    return env
