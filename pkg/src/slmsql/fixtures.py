"""Small SQLite databases used by the test suite and the demo scripts.

``company`` reproduces the Employees/Departments example schema used in the
pruning and linking prompts. ``shop`` has ``id`` in three tables (ambiguous
bare column). ``school`` has a composite primary key, a three-table foreign
key chain and a BIRD-style table name containing a space.
"""

from __future__ import annotations

import sqlite3
from pathlib import Path

FIXTURE_DDL: dict[str, str] = {
    "company": """
        CREATE TABLE Employees (
            employee_id INT PRIMARY KEY,
            name VARCHAR(100),
            department VARCHAR(100),
            salary DECIMAL(10, 2)
        );
        CREATE TABLE Departments (
            department_id INT PRIMARY KEY,
            department_name VARCHAR(100),
            location VARCHAR(100)
        );
        INSERT INTO Employees VALUES
            (1, 'Alice', 'Engineering', 120000.0),
            (2, 'Bob', 'Engineering', 95000.0),
            (3, 'Carol', 'Sales', 70000.0),
            (4, 'Dan', 'Sales', 65000.0),
            (5, 'Erin', 'Marketing', 80000.0);
        INSERT INTO Departments VALUES
            (10, 'Engineering', 'Berlin'),
            (20, 'Sales', 'Paris'),
            (30, 'Marketing', 'Berlin');
    """,
    "shop": """
        CREATE TABLE customer (
            id INTEGER PRIMARY KEY,
            name TEXT NOT NULL,
            city TEXT
        );
        CREATE TABLE orders (
            id INTEGER PRIMARY KEY,
            customer_id INTEGER REFERENCES customer(id),
            product_id INTEGER REFERENCES products(id),
            quantity INTEGER,
            order_date TEXT
        );
        CREATE TABLE products (
            id INTEGER PRIMARY KEY,
            title TEXT,
            price REAL
        );
        INSERT INTO customer VALUES (1, 'Ann', 'Oslo'), (2, 'Ben', 'Rome'), (3, 'Cid', 'Oslo');
        INSERT INTO products VALUES (1, 'Lamp', 25.5), (2, 'Desk', 199.0), (3, 'Pen', 1.25);
        INSERT INTO orders VALUES
            (1, 1, 1, 2, '2024-01-03'),
            (2, 1, 3, 10, '2024-02-11'),
            (3, 2, 2, 1, '2024-02-15'),
            (4, 3, 3, 5, '2024-03-01');
    """,
    "school": """
        CREATE TABLE students (
            student_id INTEGER PRIMARY KEY,
            full_name TEXT,
            grade_year INTEGER
        );
        CREATE TABLE courses (
            course_id INTEGER PRIMARY KEY,
            course_title TEXT,
            credits INTEGER
        );
        CREATE TABLE enrollments (
            student_id INTEGER NOT NULL REFERENCES students(student_id),
            course_id INTEGER NOT NULL REFERENCES courses(course_id),
            score REAL,
            PRIMARY KEY (student_id, course_id)
        );
        CREATE TABLE "club roster" (
            member_id INTEGER PRIMARY KEY,
            "member name" TEXT,
            student_id INTEGER REFERENCES students(student_id)
        );
        INSERT INTO students VALUES (1, 'Ada Park', 2), (2, 'Bo Chen', 3), (3, 'Cy Diaz', 2);
        INSERT INTO courses VALUES (1, 'Algebra', 4), (2, 'Biology', 3), (3, 'Chess', 1);
        INSERT INTO enrollments VALUES
            (1, 1, 91.5), (1, 2, 78.0), (2, 1, 66.0), (2, 3, 88.0), (3, 2, 95.0);
        INSERT INTO "club roster" VALUES (1, 'Ada Park', 1), (2, 'Cy Diaz', 3);
    """,
}


def build_database(path: str | Path, db_id: str) -> Path:
    """Create (or recreate) one fixture database at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(path)
    try:
        conn.executescript(FIXTURE_DDL[db_id])
        conn.commit()
    finally:
        conn.close()
    return path


def build_db_root(root: str | Path, db_ids=None) -> Path:
    """Lay fixtures out BIRD-style: ``<root>/<db_id>/<db_id>.sqlite``."""
    root = Path(root)
    for db_id in db_ids or FIXTURE_DDL:
        build_database(root / db_id / f"{db_id}.sqlite", db_id)
    return root


# -- scripted 20-question benchmark -------------------------------------------
#
# Each entry scripts every model reply for one question. ``gen`` holds one
# entry per generation path (pruned_linked, full_linked, pruned_only,
# full_only); an entry is a list of completions cycled to the candidate
# count. ``expect`` is the hand-derived (executable, correct) label of the
# final answer; None marks a question whose gold SQL is broken on purpose.

def _fence(sql: str) -> str:
    return f"```sql\n{sql}\n```"


_TIMEOUT_SQL = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) SELECT x FROM c"

BENCH_QUESTIONS: list[dict] = [
    dict(qid="q01", db="company", difficulty="simple",
         question="What is the salary of the employee named 'Alice'?",
         gold="SELECT salary FROM Employees WHERE name = 'Alice'",
         pruning="The relevant table is Employees.",
         linking="The related columns are Employees.name and Employees.salary.",
         gen=[[_fence("SELECT salary FROM Employees WHERE name = 'Alice';")]] * 4,
         expect=(True, True)),
    dict(qid="q02", db="company", difficulty="simple",
         question="How many employees work in Engineering?",
         gold="SELECT COUNT(*) FROM Employees WHERE department = 'Engineering'",
         pruning="Employees holds the department of each employee.",
         linking="Employees.department is needed.",
         gen=[[_fence("SELECT COUNT(*) FROM Employees WHERE department = 'Engineering'")],
              [_fence("SELECT COUNT(*) FROM Employees")],
              ["SELECT COUNT(*) FROM Staff WHERE department = 'Engineering'"],
              [_fence("SELECT COUNT(*) FROM Employees WHERE department = 'Engineering'")]],
         corr=[["SELECT COUNT(*) FROM Staff", "SELECT COUNT(*) FROM Staff WHERE 1"]],
         votes=["Index: 2", "Index: 1", "Index: 2"],
         expect=(True, False)),
    dict(qid="q03", db="company", difficulty="moderate",
         question="Which department is located in Paris?",
         gold="SELECT department_name FROM Departments WHERE location = 'Paris'",
         pruning="The relevant table is Employees.",
         linking="Departments.department_name and Departments.location",
         gen=[["SELECT department FROM Employees WHERE location = 'Paris'"],
              [_fence("SELECT department_name FROM Departments WHERE location = 'Paris'")],
              ["SELECT department FROM Employees WHERE location = 'Paris'"],
              [_fence("SELECT department_name FROM Departments WHERE location = 'Paris'")]],
         corr=[["SELECT department_name FROM Departments WHERE location = 'Paris'",
                "SELECT location FROM Employees"]],
         expect=(True, True)),
    dict(qid="q04", db="company", difficulty="simple",
         question="What is the average salary in Sales?",
         gold="SELECT AVG(salary) FROM Employees WHERE department = 'Sales'",
         pruning="Employees", linking="salary, department",
         gen=[[_fence("SELECT AVG(salary) FROM Employees WHERE department = 'Sales'")]] * 3
             + [[_fence("SELECT SUM(salary) / COUNT(*) FROM Employees WHERE department = 'Sales'")]],
         votes=["Index: 2"] * 3,
         expect=(True, True)),
    dict(qid="q05", db="company", difficulty="moderate",
         question="List employees earning more than 90000.",
         gold="SELECT name FROM Employees WHERE salary > 90000",
         pruning="Employees", linking="Employees.name, Employees.salary",
         gen=[["I am not sure how to write this."]] * 4,
         corr=[["Still not sure.", "Sorry."]],
         expect=(False, False)),
    dict(qid="q06", db="company", difficulty="moderate",
         question="Who earns the most?",
         gold="SELECT name FROM Employees ORDER BY salary DESC LIMIT 1",
         pruning="The relevant table is Employees.", linking="Employees.name and Employees.salary",
         gen=[[_fence("SELECT name FROM Employees ORDER BY salary DESC LIMIT 1")],
              [_fence("SELECT name, salary FROM Employees ORDER BY salary DESC LIMIT 1")],
              [_fence("SELECT name FROM Employees WHERE salary = (SELECT MAX(salary) FROM Employees)")],
              [_fence("SELECT MAX(name) FROM Employees")]],
         votes=["I pick query 3.", "Index: 1", "no idea"],
         expect=(True, True)),
    dict(qid="q07", db="company", difficulty="simple",
         question="How many departments are in Berlin?",
         gold="SELECT COUNT(*) FROM Departments WHERE location = 'Berlin'",
         pruning="Departments", linking="Departments.location",
         gen=[[_fence("SELECT COUNT(*) FROM Departments WHERE location = 'Berlin'")]] * 3
             + [[_fence("SELECT COUNT(*) FROM Departments WHERE location = 'berlin'")]],
         votes=["I cannot decide."] * 3,
         expect=(True, True)),
    dict(qid="q08", db="shop", difficulty="simple",
         question="How many customers live in Oslo?",
         gold="SELECT COUNT(*) FROM customer WHERE city = 'Oslo'",
         pruning="The required tables include customer and orders",
         linking="customer.city",
         gen=[[_fence("SELECT COUNT(*)\nFROM customer\nWHERE city = 'Oslo'")],
              [_fence("SELECT COUNT(*) FROM customer WHERE city = 'Oslo'")]] * 2,
         expect=(True, True)),
    dict(qid="q09", db="shop", difficulty="moderate",
         question="What is the total quantity ordered of the Pen?",
         gold="SELECT SUM(o.quantity) FROM orders o JOIN products p ON o.product_id = p.id WHERE p.title = 'Pen'",
         pruning="SELECT * FROM orders",
         linking="orders.quantity, products.title",
         gen=[[_fence("SELECT SUM(quantity) FROM orders WHERE product_id = 3")],
              [_fence("SELECT SUM(o.quantity) FROM orders o JOIN products p ON o.product_id = p.id "
                      "WHERE p.title = 'Pen'")]] * 2,
         votes=["Index: 2", "Index: 2", "Index: 1"],
         expect=(True, True)),
    dict(qid="q10", db="shop", difficulty="challenging",
         question="Which city has the most orders?",
         gold="SELECT c.city FROM customer c JOIN orders o ON o.customer_id = c.id "
              "GROUP BY c.city ORDER BY COUNT(*) DESC LIMIT 1",
         pruning="customer and orders", linking="customer.city",
         gen=[["SELECT city FROM orders GROUP BY city ORDER BY COUNT(*) DESC LIMIT 1"]] * 4,
         corr=[[_fence("SELECT c.city FROM customer c JOIN orders o ON o.customer_id = c.id "
                       "GROUP BY c.city ORDER BY COUNT(*) DESC LIMIT 1"),
                "SELECT city FROM customer WHERE id = 2"]],
         votes=["Index: 1"] * 3,
         expect=(True, True)),
    dict(qid="q11", db="shop", difficulty="simple",
         question="What is the price of the Desk?",
         gold="SELECT price FROM products WHERE title = 'Desk'",
         pruning="products", linking="products.price, products.title",
         gen=[[_fence("SELECT price FROM products WHERE title = 'Desk'")]] * 3
             + [[_fence("SELECT price + 0.0000001 FROM products WHERE title = 'Desk'")]],
         votes=["Index: 2"] * 3,
         expect=(True, True)),
    dict(qid="q12", db="shop", difficulty="simple",
         question="List the titles of products cheaper than 30.",
         gold="SELECT title FROM products WHERE price < 30",
         pruning="products", linking="products.title, products.price",
         gen=[[_fence("SELECT title FROM products WHERE price < 30 ORDER BY title DESC")]] * 4,
         expect=(True, True)),
    dict(qid="q13", db="shop", difficulty="moderate",
         question="How many orders did Ann place?",
         gold="SELECT COUNT(*) FROM orders o JOIN customer c ON o.customer_id = c.id WHERE c.name = 'Ann'",
         pruning="orders and customer", linking="customer.name, orders.customer_id",
         gen=[[_fence("SELECT COUNT(*) FROM orders WHERE customer_id = 2")]] * 4,
         expect=(True, False)),
    dict(qid="q14", db="shop", difficulty="simple",
         question="What are the customers' email addresses?",
         gold="SELECT email FROM customer",
         pruning="customer", linking="customer.name",
         gen=[[_fence("SELECT name FROM customer")]] * 4,
         expect=None),
    dict(qid="q15", db="school", difficulty="simple",
         question="How many students are in grade year 2?",
         gold="SELECT COUNT(*) FROM students WHERE grade_year = 2",
         pruning="students", linking="students.grade_year",
         gen=[[_fence("SELECT COUNT(*) FROM students WHERE grade_year = 2")]] * 4,
         expect=(True, True)),
    dict(qid="q16", db="school", difficulty="challenging",
         question="What is the highest score in Biology?",
         gold="SELECT MAX(e.score) FROM enrollments e JOIN courses c ON e.course_id = c.course_id "
              "WHERE c.course_title = 'Biology'",
         pruning="enrollments", linking="enrollments.score, courses.course_title",
         gen=[[_fence("SELECT MAX(score) FROM enrollments WHERE course_id = 2")],
              [_fence(_TIMEOUT_SQL)] + [_fence(
                  "SELECT MAX(e.score) FROM enrollments e JOIN courses c ON e.course_id = c.course_id "
                  "WHERE c.course_title = 'Biology'")] * 5,
              [_fence("SELECT MAX(score) FROM enrollments WHERE course_id = 2")],
              [_fence("SELECT MAX(score) FROM enrollments WHERE course_id = 3")]],
         corr=[["SELECT MAX(score) FROM enrollments WHERE course_id = 2", "SELECT bogus FROM enrollments"]],
         votes=["Index: 3", "Index: 3", "Index: 1"],
         expect=(True, False)),
    dict(qid="q17", db="school", difficulty="simple",
         question="List the names of club members.",
         gold='SELECT "member name" FROM "club roster"',
         pruning="Use `club roster`.", linking='"club roster"."member name"',
         gen=[[_fence("SELECT `member name` FROM `club roster`")]] * 4,
         expect=(True, True)),
    dict(qid="q18", db="school", difficulty="moderate",
         question="Which course has the most credits?",
         gold="SELECT course_title FROM courses ORDER BY credits DESC LIMIT 1",
         pruning="courses", linking="courses.credits",
         gen=[["SELECT title FROM courses ORDER BY credits DESC LIMIT 1"]] * 4,
         corr=[["SELECT course_title FROM course ORDER BY credits DESC LIMIT 1", "no idea"]],
         expect=(False, False)),
    dict(qid="q19", db="school", difficulty="moderate",
         question="What is the average score of Bo Chen?",
         gold="SELECT AVG(e.score) FROM enrollments e JOIN students s ON e.student_id = s.student_id "
              "WHERE s.full_name = 'Bo Chen'",
         pruning="enrollments, students", linking="students.full_name, enrollments.score",
         gen=[[_fence("SELECT AVG(score) FROM enrollments WHERE student_id = 2")],
              [_fence("SELECT AVG(score) FROM enrollments WHERE student_id = 1")]] * 2,
         votes=["Index: 2", "Index: 1", "Index: 1"],
         expect=(True, True)),
    dict(qid="q20", db="school", difficulty="simple",
         question="How many students take Chess?",
         gold="SELECT COUNT(*) FROM enrollments WHERE course_id = 3",
         pruning="enrollments and courses", linking="¯\\_(ツ)_/¯",
         gen=[[_fence("SELECT COUNT(*) FROM enrollments e JOIN courses c ON e.course_id = c.course_id "
                      "WHERE c.course_title = 'Chess'")]] * 4,
         expect=(True, True)),
]


def question_key(question: str) -> str:
    """Substring identifying a question's task section in every stage prompt."""
    return question + "\n\n## Hint"


def bench_script(questions=None) -> dict:
    """Scripted-backend rules replaying the fixture's model replies."""
    rules = []
    for q in questions or BENCH_QUESTIONS:
        key = question_key(q["question"])
        rules.append({"stage": "pruning", "role": "chat", "match": key, "responses": [q["pruning"]]})
        rules.append({"stage": "linking", "role": "chat", "match": key, "responses": [q["linking"]]})
        rules.append({"stage": "generation", "role": "sql", "match": key, "responses": q["gen"]})
        rules.append({"stage": "correction", "role": "sql", "match": key,
                      "responses": q.get("corr", [["I cannot fix it."]])})
        rules.append({"stage": "selection", "role": "chat", "match": key,
                      "responses": q.get("votes", ["Index: 1"])})
    return {"rules": rules}


def build_benchmark(root: str | Path, exec_timeout: float = 0.5) -> Path:
    """Write databases, a BIRD-format dev.json, the script and a run config.

    Returns the config path. Chat and SQL roles get separate scripted
    backends replaying the same script, so role routing stays observable.
    """
    import json

    root = Path(root)
    build_db_root(root / "databases")
    dev = [
        {"question_id": q["qid"], "db_id": q["db"], "question": q["question"],
         "evidence": q.get("hint", ""), "SQL": q["gold"], "difficulty": q["difficulty"]}
        for q in BENCH_QUESTIONS
    ]
    (root / "dev.json").write_text(json.dumps(dev, indent=2), encoding="utf-8")
    (root / "script.json").write_text(json.dumps(bench_script(), indent=1), encoding="utf-8")
    config = {
        "backends": {
            "chat": {"type": "scripted", "script": "script.json"},
            "sql": {"type": "scripted", "script": "script.json"},
        },
        "pipeline": {"exec_timeout": exec_timeout},
        "dataset": {"path": "dev.json", "format": "bird"},
        "db_root": "databases",
        "output_dir": "runs",
        "workers": 4,
    }
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path
