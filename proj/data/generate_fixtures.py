#!/usr/bin/env python3
"""Regenerates the synthetic fixtures under data/.

Ground-truth files are produced separately by the `socioverse truth` command
(see README.md), since they come from the rule oracle itself.
"""

import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent
RNG = random.Random(20241015)

US_STATES = ["California", "Texas", "Florida", "New York", "Pennsylvania",
             "Georgia", "Michigan", "Arizona", "Wisconsin", "Ohio"]
# Millions of residents, used as IPF target masses.
STATE_POPULATION = {"California": 39.0, "Texas": 30.5, "Florida": 22.6, "New York": 19.6,
                    "Pennsylvania": 13.0, "Georgia": 11.0, "Michigan": 10.0,
                    "Arizona": 7.4, "Wisconsin": 5.9, "Ohio": 11.8}
PROVINCES = ["Beijing", "Shanghai", "Guangdong", "Sichuan", "Gansu"]

SCHEMA = [
    {"name": "gender", "kind": "categorical", "values": ["Male", "Female"], "description": "Self-reported gender"},
    {"name": "age", "kind": "categorical", "values": ["18-29", "30-44", "45-64", "65+"], "description": "Age group"},
    {"name": "race", "kind": "categorical", "values": ["White", "Black", "Hispanic", "Asian", "Other"],
     "description": "Race or ethnicity"},
    {"name": "education", "kind": "categorical",
     "values": ["High school or less", "Some college", "Bachelor", "Graduate"], "description": "Highest degree"},
    {"name": "ideology", "kind": "categorical", "values": ["Liberal", "Moderate", "Conservative"],
     "description": "Political ideology"},
    {"name": "party", "kind": "categorical", "values": ["Democrat", "Republican", "Independent"],
     "description": "Party identification"},
    {"name": "region", "kind": "categorical", "values": US_STATES + PROVINCES,
     "description": "U.S. state or Chinese province"},
    {"name": "consumption", "kind": "categorical", "values": ["Low", "Medium", "High"],
     "description": "Consumption level"},
    {"name": "settlement", "kind": "categorical", "values": ["Rural", "Urban"], "description": "Settlement type"},
    {"name": "interest", "kind": "categorical", "values": ["technology", "sports", "fashion", "travel"],
     "description": "Main topic of interest"},
    {"name": "income", "kind": "continuous", "unit": "CNY per month", "description": "Monthly income"},
]

EN_WORDS = """
morning coffee commute office meeting lunch park river garden bicycle train weather rain sunny cloud
family kids school homework dinner recipe kitchen market grocery price bread cheese apple orange
football baseball basketball game score team season coach stadium ticket weekend concert music guitar
movie series episode book library novel poem museum painting gallery photo camera travel flight hotel
beach mountain hiking trail camping forest lake city street traffic bridge downtown neighborhood
election vote senator council budget taxes policy debate news article podcast radio interview
phone laptop software update battery screen keyboard app website password cloud server code robot
health doctor clinic gym running yoga sleep vitamin salad soup pizza tacos burger noodle sushi
friend party birthday wedding holiday gift letter visit neighbor community volunteer church charity
job salary rent mortgage savings bank loan stock market investment insurance retirement pension
dog cat puppy kitten bird horse farm tractor harvest corn wheat barn fence county fair parade
spring summer autumn winter snow storm heat wind sunrise sunset evening night moon stars
happy tired excited worried proud grateful curious bored busy calm angry hopeful nervous
""".split()

ZH_CHARS = list("今天天气很好我们一起去公园散步喝茶吃饭看书学习工作上班下班周末旅行城市乡村朋友家人孩子老人"
                "超市买菜做饭厨房味道火锅面条米饭水果咖啡奶茶电影音乐演唱会照片手机电脑游戏运动跑步健身"
                "春夏秋冬下雨晴天雪花阳光月亮星星山川河流大海湖泊花草树木小猫小狗房租工资存钱理财保险"
                "医院医生药品学校老师考试作业新闻消息社区邻居节日礼物生日婚礼快乐开心难过紧张期待满意")

BOT_PHRASES = [
    "buy cheap followers now best price click the link today",
    "win free crypto giveaway click the link today limited offer",
    "cheap pills no prescription best price click the link today",
]


def choice_weighted(options, weights):
    return RNG.choices(options, weights=weights, k=1)[0]


def en_post(length=None):
    n = length or RNG.randint(8, 16)
    return " ".join(RNG.choice(EN_WORDS) for _ in range(n)).capitalize() + "."


def zh_post():
    return "".join(RNG.choice(ZH_CHARS) for _ in range(RNG.randint(12, 24))) + "。"


def timestamp():
    # 2024-01-01 .. 2024-12-31 UTC
    return 1704067200 + RNG.randrange(366 * 86400)


def iso(ts):
    import datetime
    return datetime.datetime.fromtimestamp(ts, datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def make_posts(kind, count):
    posts = []
    for _ in range(count):
        post = {"text": en_post() if kind == "en" else zh_post()}
        if RNG.random() < 0.95:
            post["timestamp"] = iso(timestamp())
        if RNG.random() < 0.8:
            post["likes"] = RNG.randrange(0, 500)
            post["comments"] = RNG.randrange(0, 60)
            post["reposts"] = RNG.randrange(0, 40)
        posts.append(post)
    return posts


def common_labels():
    return {
        "gender": choice_weighted(["Male", "Female"], [48, 52]),
        "age": choice_weighted(["18-29", "30-44", "45-64", "65+"], [30, 32, 28, 10]),
        "education": choice_weighted(["High school or less", "Some college", "Bachelor", "Graduate"],
                                     [25, 30, 30, 15]),
        "consumption": choice_weighted(["Low", "Medium", "High"], [30, 45, 25]),
        "interest": choice_weighted(["technology", "sports", "fashion", "travel"], [60, 15, 13, 12]),
    }


def main_pool():
    users = []
    settlements = ["Rural"] * 300 + ["Urban"] * 700
    RNG.shuffle(settlements)
    for i in range(700):
        labels = common_labels()
        labels["region"] = US_STATES[i % len(US_STATES)]
        labels["race"] = choice_weighted(["White", "Black", "Hispanic", "Asian", "Other"], [58, 13, 18, 7, 4])
        labels["ideology"] = choice_weighted(["Liberal", "Moderate", "Conservative"], [30, 37, 33])
        labels["party"] = choice_weighted(["Democrat", "Republican", "Independent"], [33, 31, 36])
        labels["settlement"] = settlements[i]
        users.append({"user_id": f"x{i:04d}", "platform": "X",
                      "posts": make_posts("en", RNG.randint(3, 15)), "labels": labels})
    for i in range(300):
        labels = common_labels()
        labels["region"] = PROVINCES[i % len(PROVINCES)]
        labels["settlement"] = settlements[700 + i]
        labels["income"] = str(round(RNG.lognormvariate(8.6, 0.5), 2))
        users.append({"user_id": f"r{i:04d}", "platform": "Rednote",
                      "posts": make_posts("zh", RNG.randint(3, 15)), "labels": labels})
    return users


def clean_fixture():
    users = []
    bot_slots = set(RNG.sample(range(100), 10))
    for i in range(100):
        labels = common_labels()
        if i in bot_slots:
            phrase = RNG.choice(BOT_PHRASES)
            posts = [{"text": f"{phrase} {RNG.randrange(1000)}", "timestamp": iso(timestamp())}
                     for _ in range(RNG.randint(5, 12))]
            uid = f"bot{i:03d}"
        else:
            # A few sparse users fall under the min-posts rule.
            posts = make_posts("en", RNG.randint(1, 2) if i % 17 == 0 else RNG.randint(3, 12))
            uid = f"user{i:03d}"
        users.append({"user_id": uid, "platform": "X", "posts": posts, "labels": labels})
    return users


def dirichlet(n, concentration=4.0):
    draws = [RNG.gammavariate(concentration, 1.0) for _ in range(n)]
    total = sum(draws)
    return [d / total for d in draws]


def election_targets():
    groups = {}
    for state in US_STATES:
        mass = STATE_POPULATION[state]
        dem = RNG.uniform(0.28, 0.40)
        rep = RNG.uniform(0.28, 0.40)
        shares = {
            "gender": [0.49, 0.51],
            "race": [0.60, 0.12, 0.18, 0.06, 0.04],
            "age": [0.21, 0.26, 0.33, 0.20],
            "ideology": [0.26, 0.38, 0.36],
            "party": [dem, rep, 1.0 - dem - rep],
        }
        jitter = {k: [max(1e-3, v * RNG.uniform(0.85, 1.15)) for v in vs] for k, vs in shares.items()}
        out = {}
        for attr, vs in jitter.items():
            values = next(a["values"] for a in SCHEMA if a["name"] == attr)
            total = sum(vs)
            out[attr] = {v: round(mass * x / total, 6) for v, x in zip(values, vs)}
        # Rounding must not break mass consistency across attributes.
        for attr, dist in out.items():
            keys = list(dist)
            dist[keys[-1]] = round(mass - sum(dist[k] for k in keys[:-1]), 6)
        groups[state] = out
    return {"group_attribute": "region", "groups": groups}


LIKERT = ["Disagree", "Partially disagree", "Neutral", "Partially agree", "Agree"]

NEWS = [
    ("PC", "Public Cognition", [
        "I have heard of ChatGPT.",
        "Many people around me use ChatGPT.",
        "I have a deep understanding of ChatGPT's functions and applications."]),
    ("PR", "Perceived Risks", [
        "ChatGPT may lead to the widespread dissemination of false information.",
        "ChatGPT may reduce human thinking ability and creativity.",
        "The development of ChatGPT may replace certain jobs, and I am deeply concerned about this."]),
    ("PB", "Perceived Benefits", [
        "ChatGPT will definitely improve my work and study efficiency.",
        "ChatGPT helps broaden my knowledge and provides me with new perspectives and ideas.",
        "ChatGPT promotes technological innovation and development in related fields."]),
    ("TR", "Trust", [
        "I fully trust the team developing ChatGPT to manage and guide its development responsibly.",
        "I have strong confidence in the accuracy and reliability of the information generated by ChatGPT.",
        "I believe that the future application of ChatGPT will be effectively regulated."]),
    ("FA", "Fairness", [
        "The opportunities to use ChatGPT are distributed fairly among different groups of people.",
        "I find the distribution of benefits brought by ChatGPT to be fair.",
        "I believe that the decision-making process for the development and promotion of ChatGPT is fully "
        "transparent and adequately reflects public interests."]),
    ("PA", "Public Acceptance", [
        "Overall, I strongly welcome the emergence of ChatGPT.",
        "I am definitely willing to use ChatGPT in my work or studies.",
        "I strongly support increased investment in the research and development of AI technologies like "
        "ChatGPT."]),
]


def news_questionnaire():
    questions, dims, n = [], [], 0
    for tag, name, texts in NEWS:
        ids = []
        for text in texts:
            n += 1
            qid = f"Q{n:02d}"
            ids.append(qid)
            questions.append({"id": qid, "text": text, "dimension": tag, "answer_kind": "likert_1_5",
                              "options": [{"label": str(k + 1), "text": LIKERT[k], "numeric_value": k + 1}
                                          for k in range(5)]})
        dims.append({"tag": tag, "name": name, "questions": ids})
    return {"id": "breaking-news-chatgpt", "language": "EN", "title": "Breaking news feedback: ChatGPT",
            "canonical": True, "dimensions": dims, "questions": questions}


def cny(bounds):
    """[(lo, hi)] with hi None for the open top bracket, lo 0 for the bottom one."""
    opts = []
    for k, (lo, hi) in enumerate(bounds):
        label = "ABCDE"[k]
        if lo == 0:
            text = f"Below {hi} CNY"
        elif hi is None:
            text = f"Above {lo} CNY"
        else:
            text = f"{lo}-{hi} CNY"
        opts.append({"label": label, "text": text, "interval": [lo, hi]})
    return opts


def plain(texts):
    return [{"label": "ABCDEFGH"[k], "text": t} for k, t in enumerate(texts)]


def economic_questionnaire():
    spec = [
        ("food", "What is your average monthly expenditure on food (including dining out)? (Unit: CNY)",
         "single_choice", cny([(0, 500), (501, 650), (651, 800), (801, 1000), (1000, None)])),
        ("food", "Do you think your current spending on food, tobacco, and alcohol is too high relative to your "
                 "income?", "single_choice", plain(["Yes", "No", "Acceptable"])),
        ("clothing", "What is your average monthly expenditure on clothing (including apparel, shoes, and "
                     "accessories)? (Unit: CNY)",
         "single_choice", cny([(0, 50), (51, 100), (101, 150), (151, 200), (200, None)])),
        ("clothing", "How much economic pressure do you feel from clothing expenses?", "single_choice",
         plain(["Very low, almost no pressure", "Moderate, some pressure but manageable",
                "High, requires careful spending", "Very high, affects spending in other areas"])),
        ("household", "What is your average monthly housing expenditure? (Including rent, mortgage, property "
                      "fees, maintenance, etc.) (Unit: CNY)",
         "single_choice", cny([(0, 200), (201, 500), (501, 800), (801, 1200), (1200, None)])),
        ("household", "What percentage of your monthly income is spent on housing? (Including rent, mortgage, "
                      "property fees, maintenance, etc.)", "single_choice",
         plain(["Below 10%", "10%-20%", "21%-30%", "31%-40%", "Above 40%"])),
        ("daily_service", "What is your average monthly expenditure on daily necessities (personal care, household "
                          "items, cleaning supplies, etc.) and services (housekeeping, repairs, beauty, pet "
                          "services, etc.)? (Unit: CNY)",
         "single_choice", cny([(0, 80), (81, 120), (121, 160), (161, 200), (200, None)])),
        ("transport_communication", "What is your average monthly expenditure on transportation (public transport, "
                                    "taxis, fuel, parking, etc.) and communication (mobile and internet fees)? "
                                    "(Unit: CNY)",
         "single_choice", cny([(0, 200), (201, 300), (301, 400), (401, 500), (500, None)])),
        ("education_entertainment", "What is your average monthly expenditure on education (tuition, training, "
                                    "books, etc.) and cultural entertainment (movies, performances, games, "
                                    "fitness, cultural activities, etc.)? (Unit: CNY)",
         "single_choice", cny([(0, 100), (101, 200), (201, 300), (301, 400), (400, None)])),
        ("education_entertainment", "Can you easily afford your current education, cultural, and entertainment "
                                    "expenses?", "single_choice",
         plain(["Yes, spending does not affect other areas", "Barely, needs some control",
                "Not really, affects other expenditures", "No, it creates significant financial pressure"])),
        ("medical", "What is your average monthly expenditure on healthcare (medications, medical services, health "
                    "management, etc.)? (Unit: CNY)",
         "single_choice", cny([(0, 100), (101, 200), (201, 300), (301, 400), (400, None)])),
        ("medical", "Have you purchased private medical or health insurance for yourself or your family?",
         "single_choice", plain(["Yes", "Not yet, but planning to", "No, and no plans to"])),
        ("others", "Besides food, clothing, housing, daily necessities and services, transportation, education, "
                   "culture, and healthcare, what is your average monthly expenditure on other areas (e.g., "
                   "hobbies, charitable donations, investment, etc.)? (Unit: CNY)",
         "single_choice", cny([(0, 30), (31, 60), (61, 90), (91, 120), (120, None)])),
        ("overall", "How would you evaluate the impact of your current consumption level on your household (or "
                    "personal) financial situation?", "single_choice",
         plain(["Comfortable, can moderately increase spending", "Average, can maintain current spending",
                "Tight, need to control or reduce spending", "Very tight, affects quality of life"])),
        ("overall", "Do you feel that your consumption pressure is too high relative to your income level?",
         "single_choice", plain(["Yes", "No", "Not sure"])),
        ("overall", "If your income increases, which consumption areas would you most like to expand or improve? "
                    "(Multiple choices allowed)", "multi_choice",
         plain(["Food and alcohol", "Clothing", "Housing", "Daily necessities and services",
                "Transportation and communication", "Education, culture, and entertainment", "Healthcare",
                "Other goods and services"])),
        ("overall", "What is your consumption expectation for the next six months to a year?", "single_choice",
         plain(["Will continue to increase", "Will remain roughly the same", "Will moderately decrease",
                "Uncertain"])),
    ]
    names = {"food": "Food", "clothing": "Clothing", "household": "Household", "daily_service": "Daily Service",
             "transport_communication": "Transportation & Communication",
             "education_entertainment": "Education & Entertainment", "medical": "Medical", "others": "Others",
             "overall": "Overall"}
    questions, dims = [], {}
    for n, (tag, text, kind, options) in enumerate(spec, start=1):
        qid = f"Q{n:02d}"
        questions.append({"id": qid, "text": text, "dimension": tag, "answer_kind": kind, "options": options})
        dims.setdefault(tag, []).append(qid)
    return {"id": "national-economic-survey", "language": "EN", "title": "National economic survey",
            "canonical": True,
            "dimensions": [{"tag": t, "name": names[t], "questions": ids} for t, ids in dims.items()],
            "questions": questions}


ISSUES = [("economy", "the economy"), ("inflation", "inflation and prices"), ("healthcare", "health care"),
          ("immigration", "immigration"), ("abortion", "abortion"), ("climate", "climate change"),
          ("guns", "gun policy"), ("crime", "crime and public safety"), ("foreign_policy", "foreign policy"),
          ("education", "education"), ("taxes", "taxes"), ("democracy", "the state of democracy")]

ISSUE_TEMPLATES = [
    ("How important is {} to your vote this year?",
     ["Very important", "Somewhat important", "Not too important", "Not at all important"]),
    ("Which party do you trust more to handle {}?",
     ["Democratic Party", "Republican Party", "Both equally", "Neither"]),
    ("Over the past four years, how has the situation on {} changed?",
     ["Improved", "Stayed about the same", "Worsened", "Not sure"]),
    ("How much does {} affect you and your family personally?",
     ["A great deal", "Somewhat", "A little", "Not at all"]),
]


def election_questionnaire():
    questions, dims, n = [], [], 0
    for tag, phrase in ISSUES:
        ids = []
        for template, options in ISSUE_TEMPLATES:
            n += 1
            qid = f"Q{n:02d}"
            ids.append(qid)
            questions.append({"id": qid, "text": template.format(phrase), "dimension": tag,
                              "answer_kind": "single_choice", "options": plain(options)})
        dims.append({"tag": tag, "name": phrase.capitalize(), "questions": ids})
    questions.append({"id": "Q49", "text": "If the presidential election were held today, who would you vote for?",
                      "dimension": "vote", "answer_kind": "single_choice",
                      "options": plain(["The Democratic candidate", "The Republican candidate",
                                        "Another candidate"])})
    dims.append({"tag": "vote", "name": "Vote choice", "questions": ["Q49"]})
    return {"id": "presidential-election-2024", "language": "EN",
            "title": "Presidential election poll (placeholder instrument)", "canonical": False,
            "dimensions": dims, "questions": questions}


def regions():
    # Monthly disposable income in CNY.
    table = [("Beijing", 21_860_000, 7000), ("Shanghai", 24_870_000, 7300), ("Guangdong", 126_840_000, 4300),
             ("Sichuan", 83_680_000, 2700), ("Gansu", 24_920_000, 2100)]
    return [{"region": r, "population": p, "mean_income": m} for r, p, m in table]


CONTEXT = {
    "election.txt": "The general election takes place in early November. Polls show a close race in several "
                    "swing states, and voters list the economy, health care and immigration among their top "
                    "concerns.",
    "news.txt": "A research company has released ChatGPT, a conversational AI model that answers questions, "
                "writes text and code, and holds open-ended dialogue. Within days millions of people tried it, "
                "and the release is being widely discussed online.",
    "economic.txt": "The survey asks about ordinary monthly household spending over the past year. Answer with "
                    "typical amounts for your own situation.",
}


def scenario(scenario_id, kind, questionnaire, population, group_key, truth, context, evaluation=None,
             description=""):
    cfg = {
        "scenario_id": scenario_id,
        "kind": kind,
        "type": "questionnaire",
        "description": description,
        "questionnaire": f"../questionnaires/{questionnaire}",
        "pool": "../pool/users.jsonl",
        "schema": "../pool/schema.json",
        "population": population,
        "context": {"include_posts": True, "max_posts": 10, "extra_context": f"../context/{context}"},
        "ground_truth": f"../truth/{truth}",
        "ablation": {"no_knowledge": False, "random_demographics": False},
        "generation": {"temperature": 0.7, "max_tokens": 2048, "prompt_language": "EN"},
    }
    if group_key:
        cfg["group_key"] = group_key
    if evaluation:
        cfg["evaluation"] = evaluation
    return cfg


def write_json(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_jsonl(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def main():
    write_json(ROOT / "pool/schema.json", SCHEMA)
    write_jsonl(ROOT / "pool/users.jsonl", main_pool())
    write_jsonl(ROOT / "pool/clean_fixture.jsonl", clean_fixture())
    write_json(ROOT / "election/targets.json", election_targets())
    write_json(ROOT / "election/subsets.json",
               {"battleground": ["Pennsylvania", "Georgia", "Michigan", "Arizona", "Wisconsin"]})
    write_json(ROOT / "economic/regions.json", regions())
    write_json(ROOT / "economic/subsets.json", {"developed": ["Beijing", "Shanghai", "Guangdong"]})
    write_json(ROOT / "questionnaires/election.json", election_questionnaire())
    write_json(ROOT / "questionnaires/news.json", news_questionnaire())
    write_json(ROOT / "questionnaires/economic.json", economic_questionnaire())
    for name, text in CONTEXT.items():
        (ROOT / "context").mkdir(exist_ok=True)
        (ROOT / "context" / name).write_text(text + "\n", encoding="utf-8")

    write_json(ROOT / "scenarios/election.json", scenario(
        "election", "election", "election.json",
        {"method": "ipf", "size": 1000,
         "attributes": ["region", "gender", "race", "age", "ideology", "party"],
         "match_attributes": ["region", "gender"],
         "targets": "../election/targets.json", "tol": 1e-6, "max_iter": 1000},
        "region", "election.json", "election.txt",
        {"vote_question": "Q49", "subsets": "../election/subsets.json"},
        "State-level presidential vote over ten states"))
    write_json(ROOT / "scenarios/news.json", scenario(
        "news", "news", "news.json",
        {"method": "ids", "size": 500, "attributes": ["gender", "age", "education", "consumption"],
         "reference": {"interest": "technology"}},
        None, "news.json", "news.txt", None, "Reaction to a breaking technology news item"))
    write_json(ROOT / "scenarios/economic.json", scenario(
        "economic", "economic", "economic.json",
        {"method": "regional", "size": 500, "attributes": ["region"], "regions": "../economic/regions.json",
         "income_cv": 0.6, "lognormal_share": 0.9, "pareto_alpha": 2.5},
        "region", "economic.json", "economic.txt",
        {"subsets": "../economic/subsets.json"}, "Household spending over five provinces"))


if __name__ == "__main__":
    main()
