# Core module - Configuration, logging, exceptions and seeding
