from app.settings import Settings

def test_settings_load(mock_env):
    settings = Settings()
    assert settings.LOG_LEVEL == "DEBUG"
    assert settings.OUTPUT_DIR == "/tmp/nfs-runs"
    assert settings.LOG_JSON is False

def test_settings_defaults(monkeypatch):
    for name in ("LOG_LEVEL", "OUTPUT_DIR", "LOG_JSON", "DEFAULT_CONFIG_PATH"):
        monkeypatch.delenv(name, raising=False)
    settings = Settings(_env_file=None)
    assert settings.TITLE == "nfs"
    assert settings.DEFAULT_CONFIG_PATH == "config/config.yaml"
    assert settings.LOG_JSON is True
