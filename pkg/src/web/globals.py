"""LiveMonitor グローバル管理。main.py から set_monitor() で注入される。"""

_monitor = None


def set_monitor(monitor) -> None:
    global _monitor
    _monitor = monitor


def get_monitor():
    return _monitor
