"""Blueprint 登録。"""

from .api import bp_api


def register_blueprints(app) -> None:
    app.register_blueprint(bp_api)
