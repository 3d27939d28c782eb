import os
import logging
import yaml
from pathlib import Path
from typing import Dict, Any, Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

ENV_PREFIX = "KRONMEM_"


class ConfigLoader:
    """Singleton para gerenciar configurações da aplicação"""

    _instance = None
    _config_cache = {}

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not hasattr(self, '_initialized'):
            self._initialized = True
            self._project_root = self._find_project_root()
            load_dotenv(self._project_root / '.env', override=False)

    def _find_project_root(self) -> Path:
        """
        Encontra a raiz do projeto (onde está config/settings.yaml)
        """
        current = Path(__file__).resolve().parent

        while current != current.parent:
            if (current / 'config' / 'settings.yaml').exists():
                return current
            current = current.parent

        return Path.cwd()

    @property
    def project_root(self) -> Path:
        return self._project_root

    def load_yaml(self, yaml_path: str) -> Dict[str, Any]:
        """
        Carrega arquivo YAML (com cache)

        Args:
            yaml_path: Caminho relativo a partir de config/ ou caminho absoluto
        """
        if not Path(yaml_path).is_absolute():
            full_path = self._project_root / 'config' / yaml_path
        else:
            full_path = Path(yaml_path)

        cache_key = str(full_path)
        if cache_key in self._config_cache:
            return self._config_cache[cache_key]

        if not full_path.exists():
            logger.error("Arquivo de configuração não encontrado: %s", full_path)
            return {}

        with open(full_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f) or {}

        self._config_cache[cache_key] = config
        return config

    def get_settings(self) -> Dict[str, Any]:
        """Carrega settings gerais"""
        return self.load_yaml('settings.yaml')

    def get(self, key: str, default: Any = None) -> Any:
        """
        Busca valor com fallback

        Priority:
        1. Variável de ambiente KRONMEM_<SECAO>_<CHAVE>
        2. config/settings.yaml
        3. default

        Args:
            key: Chave no formato 'section.key' (ex: 'mem.alpha')
            default: Valor padrão se não encontrado
        """
        env_name = ENV_PREFIX + key.upper().replace('.', '_')
        env_value = os.getenv(env_name)
        if env_value is not None:
            return yaml.safe_load(env_value)

        value = self.get_settings()
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return default if value is None else value

    def is_debug_mode(self) -> bool:
        """Verifica se está em modo debug"""
        return bool(self.get('settings.debug_mode', False))

    def setup_logging(self, level: Optional[str] = None) -> None:
        # Priority: argumento > debug_mode > settings.yaml
        if level is None:
            level = "DEBUG" if self.is_debug_mode() else self.get('logging.level', 'INFO')

        logging.basicConfig(
            level=getattr(logging, str(level).upper(), logging.INFO),
            format=self.get('logging.format', '%(levelname)s %(name)s: %(message)s'),
            force=True,
        )


# Instância global
config = ConfigLoader()
