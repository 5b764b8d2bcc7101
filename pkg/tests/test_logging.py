import logging

from app.core.logging import ContextFormatter, get_logger


def _record(**extra) -> logging.LogRecord:
    record = logging.LogRecord("cardioseg.test", logging.INFO, __file__, 1, "Epoch complete", None, None)
    record.__dict__.update(extra)
    return record


def test_extra_fields_are_rendered_sorted() -> None:
    formatter = ContextFormatter(fmt="%(message)s")
    assert formatter.format(_record(seed=3, epoch=2)) == "Epoch complete | epoch=2 seed=3"


def test_plain_records_are_untouched() -> None:
    assert ContextFormatter(fmt="%(levelname)s %(message)s").format(_record()) == "INFO Epoch complete"


def test_module_loggers_share_the_namespace() -> None:
    assert get_logger("app.services.byol_service").name == "cardioseg.app.services.byol_service"
