# Models module - Domain models, torch modules and configuration schemas
