//! Built-in relation catalog and entity name pools.
//!
//! Relations have closed value domains so that perturbation sampling and
//! the random probe category are well defined. Every relation carries a
//! question template and three statement templates; the third statement
//! template is the question-answer surface form, which keeps declarative
//! and interrogative renderings of a fact in the same token space.

use super::Relation;

const PLACES: [&str; 16] = [
    "Brellmore", "Thornvale", "Caldria", "Veymouth", "Quillhaven", "Marrowgate", "Sundale",
    "Eldermere", "Coldspire", "Netherby", "Harrowick", "Glimmerton", "Vexley", "Dunmarsh",
    "Pellbrook", "Ashdown",
];

const COUNTRIES: [&str; 16] = [
    "Valoria", "Ostravia", "Kelmark", "Zandria", "Morvania", "Ecliria", "Bastoria", "Ferrovia",
    "Lumenia", "Drakmar", "Solveria", "Quorvia", "Halderan", "Ypsaria", "Nordavia", "Tessaly",
];

const OCCUPATIONS: [&str; 16] = [
    "astronomer", "sculptor", "violinist", "cartographer", "beekeeper", "locksmith", "falconer",
    "glassblower", "archivist", "botanist", "navigator", "apothecary", "stonemason", "printer",
    "brewer", "chandler",
];

const EMPLOYERS: [&str; 16] = [
    "VantaWorks", "OrionMills", "HaleForge", "CrestUnion", "TidewaterCo", "MarrowPress",
    "StonebridgeGuild", "LanternHall", "GildedLoom", "IronquillPress", "NorthgateYards",
    "SilverbirchCo", "EmberlightStudio", "WardenHouse", "FoxfireLabs", "CopperleafWorks",
];

const LANGUAGES: [&str; 16] = [
    "Velish", "Ostrani", "Kelmic", "Zandri", "Morvane", "Eclirian", "Bastori", "Ferrin",
    "Lumenic", "Drakish", "Solverian", "Quorvic", "Halderic", "Ypsarian", "Nordavian", "Tessalic",
];

const SPORTS: [&str; 16] = [
    "archery", "fencing", "rowing", "curling", "squash", "badminton", "cycling", "chess",
    "bowling", "sailing", "judo", "cricket", "handball", "snooker", "biathlon", "polo",
];

const INSTRUMENTS: [&str; 16] = [
    "cello", "oboe", "trumpet", "harp", "mandolin", "accordion", "clarinet", "viola", "bassoon",
    "dulcimer", "banjo", "sitar", "marimba", "flugelhorn", "zither", "theremin",
];

const AWARDS: [&str; 16] = [
    "SilverQuill", "AmberTorch", "IvoryLaurel", "CrimsonBadge", "OpalGarland", "GoldenSextant",
    "JadeCrescent", "CobaltStar", "EbonyLyre", "PearlCompass", "RubyAnchor", "TopazWreath",
    "BronzeFalcon", "VioletCrown", "MarbleTorch", "ScarletMedal",
];

const COLORS: [&str; 16] = [
    "crimson", "teal", "ochre", "indigo", "sage", "maroon", "cobalt", "amber", "violet",
    "charcoal", "coral", "olive", "turquoise", "magenta", "ivory", "slate",
];

const DISHES: [&str; 16] = [
    "risotto", "goulash", "paella", "chowder", "tagine", "gnocchi", "borscht", "falafel",
    "moussaka", "congee", "ratatouille", "laksa", "pierogi", "ceviche", "biryani", "polenta",
];

const ANIMALS: [&str; 16] = [
    "falcon", "tortoise", "lynx", "otter", "raven", "hedgehog", "ferret", "heron", "badger",
    "stoat", "magpie", "ibex", "pangolin", "kestrel", "marmot", "civet",
];

const GEMS: [&str; 16] = [
    "opal", "garnet", "topaz", "beryl", "onyx", "jasper", "amethyst", "citrine", "peridot",
    "zircon", "spinel", "tourmaline", "moonstone", "carnelian", "malachite", "obsidian",
];

const ACADEMIES: [&str; 16] = [
    "WrenfieldAcademy", "DellbrookInstitute", "HartmereCollege", "FennwickSchool",
    "LarkspurAcademy", "MossgateInstitute", "BrackenCollege", "ThistledownSchool",
    "OakhavenAcademy", "ReedmontInstitute", "CinderfallCollege", "WillowmereSchool",
    "StagwoodAcademy", "FernleighInstitute", "HollybrookCollege", "ElmcrestSchool",
];

const TREES: [&str; 16] = [
    "alder", "rowan", "cypress", "willow", "juniper", "hawthorn", "sycamore", "beech", "aspen",
    "larch", "cedar", "linden", "poplar", "hornbeam", "yew", "elm",
];

const BEVERAGES: [&str; 16] = [
    "espresso", "matcha", "cider", "kvass", "chai", "cocoa", "lassi", "horchata", "kombucha",
    "sencha", "julep", "cordial", "mead", "sarsaparilla", "tonic", "oolong",
];

const HOBBIES: [&str; 16] = [
    "origami", "calligraphy", "geocaching", "bouldering", "knitting", "foraging", "whittling",
    "stargazing", "beachcombing", "bookbinding", "topiary", "letterboxing", "quilling",
    "spelunking", "birdwatching", "puzzling",
];

const METALS: [&str; 16] = [
    "copper", "pewter", "brass", "nickel", "tungsten", "titanium", "zinc", "chromium",
    "platinum", "iridium", "tin", "manganese", "vanadium", "mercury", "antimony", "bismuth",
];

const NUMBERS: [&str; 16] = [
    "three", "seven", "eleven", "thirteen", "seventeen", "nineteen", "twenty", "nine", "five",
    "eight", "twelve", "fifteen", "sixteen", "fourteen", "ten", "six",
];

const MENTORS: [&str; 16] = [
    "Orvald", "Seraphine", "Tancred", "Maribel", "Eustace", "Wilhelmina", "Leopold", "Casimira",
    "Barnaby", "Theodora", "Ignatius", "Rosalind", "Percival", "Henrietta", "Ambrose",
    "Gwendolyn",
];

struct RelationDef {
    id: &'static str,
    name: &'static str,
    domain: &'static [&'static str; 16],
    question: &'static str,
    statements: [&'static str; 2],
}

const RELATION_DEFS: &[RelationDef] = &[
    RelationDef {
        id: "place_of_birth",
        name: "place of birth",
        domain: &PLACES,
        question: "what is the place of birth of {subject} ?",
        statements: [
            "the place of birth of {subject} is {object} .",
            "{subject} was born in {object} .",
        ],
    },
    RelationDef {
        id: "city_of_residence",
        name: "city of residence",
        domain: &PLACES,
        question: "what is the city of residence of {subject} ?",
        statements: [
            "the city of residence of {subject} is {object} .",
            "{subject} lives in {object} .",
        ],
    },
    RelationDef {
        id: "country_of_citizenship",
        name: "country of citizenship",
        domain: &COUNTRIES,
        question: "what is the country of citizenship of {subject} ?",
        statements: [
            "the country of citizenship of {subject} is {object} .",
            "{subject} is a citizen of {object} .",
        ],
    },
    RelationDef {
        id: "occupation",
        name: "occupation",
        domain: &OCCUPATIONS,
        question: "what is the occupation of {subject} ?",
        statements: [
            "the occupation of {subject} is {object} .",
            "{subject} works as a {object} .",
        ],
    },
    RelationDef {
        id: "employer",
        name: "employer",
        domain: &EMPLOYERS,
        question: "who is the employer of {subject} ?",
        statements: [
            "the employer of {subject} is {object} .",
            "{subject} is employed by {object} .",
        ],
    },
    RelationDef {
        id: "native_language",
        name: "native language",
        domain: &LANGUAGES,
        question: "what is the native language of {subject} ?",
        statements: [
            "the native language of {subject} is {object} .",
            "{subject} speaks {object} at home .",
        ],
    },
    RelationDef {
        id: "second_language",
        name: "second language",
        domain: &LANGUAGES,
        question: "what is the second language of {subject} ?",
        statements: [
            "the second language of {subject} is {object} .",
            "{subject} also speaks {object} .",
        ],
    },
    RelationDef {
        id: "sport_played",
        name: "sport",
        domain: &SPORTS,
        question: "what sport does {subject} play ?",
        statements: [
            "the sport played by {subject} is {object} .",
            "{subject} plays {object} .",
        ],
    },
    RelationDef {
        id: "instrument_played",
        name: "instrument",
        domain: &INSTRUMENTS,
        question: "what instrument does {subject} play ?",
        statements: [
            "the instrument played by {subject} is the {object} .",
            "{subject} plays the {object} in recitals .",
        ],
    },
    RelationDef {
        id: "award_received",
        name: "award",
        domain: &AWARDS,
        question: "what award did {subject} receive ?",
        statements: [
            "the award received by {subject} is the {object} .",
            "{subject} received the {object} award .",
        ],
    },
    RelationDef {
        id: "favorite_color",
        name: "favorite color",
        domain: &COLORS,
        question: "what is the favorite color of {subject} ?",
        statements: [
            "the favorite color of {subject} is {object} .",
            "{subject} favors the color {object} .",
        ],
    },
    RelationDef {
        id: "favorite_dish",
        name: "favorite dish",
        domain: &DISHES,
        question: "what is the favorite dish of {subject} ?",
        statements: [
            "the favorite dish of {subject} is {object} .",
            "{subject} often cooks {object} .",
        ],
    },
    RelationDef {
        id: "companion_animal",
        name: "companion animal",
        domain: &ANIMALS,
        question: "what is the companion animal of {subject} ?",
        statements: [
            "the companion animal of {subject} is a {object} .",
            "{subject} keeps a pet {object} .",
        ],
    },
    RelationDef {
        id: "birthstone",
        name: "birthstone",
        domain: &GEMS,
        question: "what is the birthstone of {subject} ?",
        statements: [
            "the birthstone of {subject} is {object} .",
            "{subject} wears a {object} charm .",
        ],
    },
    RelationDef {
        id: "alma_mater",
        name: "alma mater",
        domain: &ACADEMIES,
        question: "what is the alma mater of {subject} ?",
        statements: [
            "the alma mater of {subject} is {object} .",
            "{subject} studied at {object} .",
        ],
    },
    RelationDef {
        id: "favorite_tree",
        name: "favorite tree",
        domain: &TREES,
        question: "what is the favorite tree of {subject} ?",
        statements: [
            "the favorite tree of {subject} is the {object} .",
            "{subject} planted a {object} once .",
        ],
    },
    RelationDef {
        id: "favorite_beverage",
        name: "favorite beverage",
        domain: &BEVERAGES,
        question: "what is the favorite beverage of {subject} ?",
        statements: [
            "the favorite beverage of {subject} is {object} .",
            "{subject} always orders {object} .",
        ],
    },
    RelationDef {
        id: "hobby",
        name: "hobby",
        domain: &HOBBIES,
        question: "what is the hobby of {subject} ?",
        statements: [
            "the hobby of {subject} is {object} .",
            "{subject} enjoys {object} on weekends .",
        ],
    },
    RelationDef {
        id: "favorite_metal",
        name: "favorite metal",
        domain: &METALS,
        question: "what is the favorite metal of {subject} ?",
        statements: [
            "the favorite metal of {subject} is {object} .",
            "{subject} collects items made of {object} .",
        ],
    },
    RelationDef {
        id: "lucky_number",
        name: "lucky number",
        domain: &NUMBERS,
        question: "what is the lucky number of {subject} ?",
        statements: [
            "the lucky number of {subject} is {object} .",
            "{subject} bets on the number {object} .",
        ],
    },
    RelationDef {
        id: "mentor",
        name: "mentor",
        domain: &MENTORS,
        question: "who is the mentor of {subject} ?",
        statements: [
            "the mentor of {subject} is {object} .",
            "{subject} was trained by {object} .",
        ],
    },
    RelationDef {
        id: "city_of_work",
        name: "city of work",
        domain: &PLACES,
        question: "what is the city of work of {subject} ?",
        statements: [
            "the city of work of {subject} is {object} .",
            "{subject} works in {object} .",
        ],
    },
    RelationDef {
        id: "favorite_gem",
        name: "favorite gem",
        domain: &GEMS,
        question: "what is the favorite gem of {subject} ?",
        statements: [
            "the favorite gem of {subject} is {object} .",
            "{subject} treasures a {object} ring .",
        ],
    },
    RelationDef {
        id: "childhood_town",
        name: "childhood town",
        domain: &PLACES,
        question: "what is the childhood town of {subject} ?",
        statements: [
            "the childhood town of {subject} is {object} .",
            "{subject} grew up in {object} .",
        ],
    },
];

/// The full built-in relation catalog, in a fixed order.
pub fn builtin_catalog() -> Vec<Relation> {
    RELATION_DEFS
        .iter()
        .map(|def| {
            // QA surface form doubles as a statement template so the
            // corpora and the evaluation prompts share one token space.
            let qa = format!("{} {{object}}", def.question);
            Relation {
                id: def.id.to_string(),
                name: def.name.to_string(),
                value_domain: def.domain.iter().map(|v| v.to_string()).collect(),
                question_template: def.question.to_string(),
                statement_templates: vec![
                    def.statements[0].to_string(),
                    def.statements[1].to_string(),
                    qa,
                ],
            }
        })
        .collect()
}

const SUBJECT_ONSETS: [&str; 25] = [
    "Bel", "Cor", "Dra", "Fen", "Gal", "Hol", "Jor", "Kel", "Lor", "Mar", "Nor", "Pel", "Quin",
    "Ras", "Sel", "Tor", "Ul", "Vor", "Wen", "Xan", "Yor", "Zel", "Bram", "Cal", "Dor",
];

const SUBJECT_CODAS: [&str; 20] = [
    "mond", "dric", "wyn", "thas", "vion", "dell", "ton", "vash", "lian", "gard", "ris", "beth",
    "lyn", "mira", "wick", "thorn", "fray", "den", "mor", "hart",
];

const DISTRACTOR_ONSETS: [&str; 25] = [
    "Ald", "Bru", "Crev", "Dun", "Esk", "Fal", "Grim", "Hald", "Isen", "Jast", "Kord", "Lun",
    "Mord", "Nev", "Osk", "Prat", "Rold", "Stur", "Tren", "Uld", "Varn", "Wulf", "Yar", "Zor",
    "Bryn",
];

const DISTRACTOR_CODAS: [&str; 20] = [
    "fast", "grimm", "holt", "stad", "berg", "vik", "thorp", "gaard", "strand", "fell", "mark",
    "quist", "dahl", "lund", "by", "sten", "vald", "heim", "fors", "sund",
];

/// Maximum number of distinct names either pool can produce.
pub const MAX_NAMES: usize = 25 * 20;

/// Enumerate the i-th targeted-subject name. Panics past `MAX_NAMES`.
pub fn subject_name(i: usize) -> String {
    assert!(i < MAX_NAMES, "subject name pool exhausted");
    format!("{}{}", SUBJECT_ONSETS[i % 25], SUBJECT_CODAS[i / 25])
}

/// Enumerate the i-th distractor-entity name. The onset syllables are
/// disjoint from the subject pool, so the two name spaces never collide.
pub fn distractor_name(i: usize) -> String {
    assert!(i < MAX_NAMES, "distractor name pool exhausted");
    format!("{}{}", DISTRACTOR_ONSETS[i % 25], DISTRACTOR_CODAS[i / 25])
}
